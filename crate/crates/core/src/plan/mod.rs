//! The estimand-spec language: structure, parser, semantic validation, and
//! per-patient resolution.
//!
//! An estimand spec pins the five estimand attributes (population, endpoint,
//! treatment-regimen declaration, per-cause event strategies, summary
//! measure) together with the imputation method for every cause. The file
//! grammar is line-oriented key/value with bracketed sections; see
//! [`grammar`] for the exact shape.

mod grammar;
mod resolve;
mod validate;

pub use grammar::{parse_spec, serialize_spec, ParseError};
pub use resolve::{resolve_patient, resolve_patient_strategy, PatientHandling, VisitDecision};
pub use validate::{default_plan, named_alternates, validate_spec, NormalizedPlan, PlanRow};

use crate::model::{Arm, CompositeEndpoint, IceCause, IceKind};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Analysis population.
#[derive(Debug, Clone, PartialEq)]
pub enum Population {
    AllRandomized,
    /// Patients whose baseline covariate lies within the given bounds.
    BaselineSubset { min: Option<f64>, max: Option<f64> },
    /// Patients whose potential stratum variable under full adherence to
    /// the experimental arm exceeds the threshold.
    PrincipalStratum { threshold: f64 },
}

/// Endpoint of the estimand.
#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    /// Continuous outcome at the final visit.
    ContinuousChange,
    /// Success indicator with event components.
    Composite(CompositeEndpoint),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryMeasure {
    DifferenceInMeans,
    DifferenceInProportions,
}

/// Strategy for handling events of one cause (or kind).
///
/// `Composite` and `PrincipalStratum` are accepted by the parser so the
/// validator can explain why they are not event strategies (the endpoint
/// and the population own them).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IceStrategy {
    Cdh,
    Nth,
    Pth,
    TreatmentPolicy,
    Dtr,
    Composite,
    PrincipalStratum,
}

impl IceStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            IceStrategy::Cdh => "cdh",
            IceStrategy::Nth => "nth",
            IceStrategy::Pth => "pth",
            IceStrategy::TreatmentPolicy => "treatment_policy",
            IceStrategy::Dtr => "dtr",
            IceStrategy::Composite => "composite",
            IceStrategy::PrincipalStratum => "principal_stratum",
        }
    }
}

impl fmt::Display for IceStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Key of a strategy or imputation entry: a cause, or a kind override that
/// takes precedence over the cause entry for events of that kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StrategyKey {
    Cause(IceCause),
    Kind(IceKind),
}

impl fmt::Display for StrategyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyKey::Cause(c) => f.write_str(c.as_str()),
            StrategyKey::Kind(k) => f.write_str(k.as_str()),
        }
    }
}

/// Imputation method family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Mar,
    ReturnToBaseline,
    RetrievedDropout,
    JumpToReference,
    CopyReference,
    SpecialPattern,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Mar => "mar",
            MethodKind::ReturnToBaseline => "return_to_baseline",
            MethodKind::RetrievedDropout => "retrieved_dropout",
            MethodKind::JumpToReference => "jump_to_reference",
            MethodKind::CopyReference => "copy_reference",
            MethodKind::SpecialPattern => "special_pattern",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A fully attributed imputation method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Reference arm for jump-to-reference / copy-reference.
    pub reference: Arm,
    /// Donor cause for special-pattern imputation.
    pub donor: Option<IceCause>,
    /// Sensitivity shift added to every cell this method imputes.
    pub delta: Option<f64>,
}

impl MethodSpec {
    pub fn of(kind: MethodKind) -> Self {
        Self { kind, reference: Arm::Control, donor: None, delta: None }
    }

    pub fn special_pattern(donor: IceCause) -> Self {
        Self { kind: MethodKind::SpecialPattern, reference: Arm::Control, donor: Some(donor), delta: None }
    }
}

/// A parsed estimand spec. Field defaults mirror the grammar's defaults, so
/// a minimal file only needs the `[strategies]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimandSpec {
    pub name: String,
    pub population: Population,
    pub endpoint: Endpoint,
    pub summary: SummaryMeasure,
    /// Pragmatic-study flag; relaxes the treatment-policy caution.
    pub pragmatic: bool,
    /// Event kinds declared part of the treatment regimen. Such events are
    /// not intercurrent events and must not be given strategies.
    pub regimen_kinds: BTreeSet<IceKind>,
    pub strategies: BTreeMap<StrategyKey, IceStrategy>,
    pub imputation: BTreeMap<StrategyKey, MethodSpec>,
    /// Method for missing values unrelated to any event.
    pub non_ice_method: MethodSpec,
    /// Sensitivity shift added to imputed cells at or after a death.
    pub death_delta: f64,
}

impl Default for EstimandSpec {
    fn default() -> Self {
        Self {
            name: "estimand".to_string(),
            population: Population::AllRandomized,
            endpoint: Endpoint::ContinuousChange,
            summary: SummaryMeasure::DifferenceInMeans,
            pragmatic: false,
            regimen_kinds: BTreeSet::new(),
            strategies: BTreeMap::new(),
            imputation: BTreeMap::new(),
            non_ice_method: MethodSpec::of(MethodKind::Mar),
            death_delta: 0.0,
        }
    }
}

impl EstimandSpec {
    /// Strategy for an event, honoring kind overrides.
    pub fn strategy_for(&self, cause: IceCause, kind: IceKind) -> Option<IceStrategy> {
        self.strategies
            .get(&StrategyKey::Kind(kind))
            .or_else(|| self.strategies.get(&StrategyKey::Cause(cause)))
            .copied()
    }

    /// Imputation method for an event, honoring kind overrides; MAR when
    /// nothing is configured.
    pub fn method_for(&self, cause: IceCause, kind: IceKind) -> MethodSpec {
        self.imputation
            .get(&StrategyKey::Kind(kind))
            .or_else(|| self.imputation.get(&StrategyKey::Cause(cause)))
            .cloned()
            .unwrap_or_else(|| MethodSpec::of(MethodKind::Mar))
    }

    /// Distinct strategies named by the spec, in canonical order.
    pub fn distinct_strategies(&self) -> Vec<IceStrategy> {
        let mut out = Vec::new();
        for s in self.strategies.values() {
            if !out.contains(s) {
                out.push(*s);
            }
        }
        out.sort_by_key(|s| s.as_str());
        out
    }
}

/// Identifier of a validation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RuleId {
    /// An event kind is declared part of the regimen and also mapped to a
    /// strategy.
    Circularity,
    /// A cause has no strategy.
    Coverage,
    /// Treatment policy assigned to a pandemic cause.
    R1,
    /// Treatment policy outside a pragmatic study.
    R2,
    /// Composite used as an event strategy instead of an endpoint.
    R3,
    /// Retrieved-dropout imputation where the scenario forbids post-event
    /// observation.
    R4,
    /// MAR-based handling of lack-of-efficacy events whose triggering
    /// measurement is not collected.
    R5,
    /// Principal stratum used as an event strategy instead of a population.
    PopulationStrategy,
    /// Summary measure inconsistent with the endpoint.
    SummaryMismatch,
    /// Death declared part of the treatment regimen.
    RegimenDeath,
    /// Reference-based imputation pointed at the experimental arm.
    ReferenceChoice,
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RuleId::Circularity => "circularity",
            RuleId::Coverage => "coverage",
            RuleId::R1 => "R1",
            RuleId::R2 => "R2",
            RuleId::R3 => "R3",
            RuleId::R4 => "R4",
            RuleId::R5 => "R5",
            RuleId::PopulationStrategy => "population_strategy",
            RuleId::SummaryMismatch => "summary_mismatch",
            RuleId::RegimenDeath => "regimen_death",
            RuleId::ReferenceChoice => "reference_choice",
        };
        f.write_str(s)
    }
}

/// One validation finding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub rule: RuleId,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.rule, self.message)
    }
}

/// Result of semantic validation. `resolved_plan` is present exactly when
/// there are no errors, and is everything downstream modules need.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<Finding>,
    pub warnings: Vec<Finding>,
    pub resolved_plan: Option<NormalizedPlan>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty() && self.warnings.is_empty()
    }
}
