//! Semantic validation of estimand specs and the default cause-to-strategy
//! road map.

use super::{
    EstimandSpec, Finding, IceStrategy, MethodKind, MethodSpec, RuleId, StrategyKey,
    SummaryMeasure, ValidationReport,
};
use crate::config::Scenario;
use crate::model::{Arm, IceCause, IceKind};
use crate::plan::Endpoint;
use std::collections::BTreeSet;

/// One row of the normalized handling table.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow {
    pub cause: IceCause,
    pub strategy: IceStrategy,
    pub method: MethodSpec,
}

/// The executable form of a validated spec: a total cause table plus kind
/// overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPlan {
    pub rows: Vec<PlanRow>,
    pub kind_overrides: Vec<(IceKind, IceStrategy, MethodSpec)>,
    pub regimen_kinds: BTreeSet<IceKind>,
    pub non_ice_method: MethodSpec,
    pub death_delta: f64,
}

impl NormalizedPlan {
    pub fn strategy_for(&self, cause: IceCause, kind: IceKind) -> IceStrategy {
        self.kind_overrides
            .iter()
            .find(|(k, _, _)| *k == kind)
            .map(|(_, s, _)| *s)
            .unwrap_or_else(|| self.rows.iter().find(|r| r.cause == cause).unwrap().strategy)
    }

    pub fn method_for(&self, cause: IceCause, kind: IceKind) -> &MethodSpec {
        self.kind_overrides
            .iter()
            .find(|(k, _, _)| *k == kind)
            .map(|(_, _, m)| m)
            .unwrap_or_else(|| &self.rows.iter().find(|r| r.cause == cause).unwrap().method)
    }
}

fn finding(rule: RuleId, message: impl Into<String>) -> Finding {
    Finding { rule, message: message.into() }
}

/// Validate a spec, optionally against the scenario it will run in.
/// Scenario-dependent rules (R4, R5) are skipped when no scenario is given.
pub fn validate_spec(spec: &EstimandSpec, scenario: Option<&Scenario>) -> ValidationReport {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();

    // Circularity: regimen declaration comes first; declared kinds are not
    // intercurrent events and must not also receive strategies.
    for kind in &spec.regimen_kinds {
        if spec.strategies.contains_key(&StrategyKey::Kind(*kind)) {
            errors.push(finding(
                RuleId::Circularity,
                format!(
                    "'{kind}' is declared part of the treatment regimen and also mapped to a \
                     strategy; declare regimens first and give strategies only to deviations"
                ),
            ));
        }
        if *kind == IceKind::Death {
            errors.push(finding(
                RuleId::RegimenDeath,
                "death cannot be part of a treatment regimen",
            ));
        }
    }

    // Coverage: every cause needs a strategy.
    for cause in IceCause::ALL {
        if !spec.strategies.contains_key(&StrategyKey::Cause(cause)) {
            errors.push(finding(RuleId::Coverage, format!("cause '{cause}' has no strategy")));
        }
    }

    for (key, strategy) in &spec.strategies {
        match strategy {
            IceStrategy::Composite => {
                errors.push(finding(
                    RuleId::R3,
                    format!(
                        "rule R3: 'composite' is not an event strategy for '{key}'; fold the \
                         event into the endpoint definition instead \
                         (endpoint = composite(...))"
                    ),
                ));
            }
            IceStrategy::PrincipalStratum => {
                errors.push(finding(
                    RuleId::PopulationStrategy,
                    format!(
                        "'principal_stratum' is a population, not an event strategy for '{key}'; \
                         use population = principal_stratum(c=...)"
                    ),
                ));
            }
            IceStrategy::TreatmentPolicy => {
                let pandemic_cause = matches!(
                    key,
                    StrategyKey::Cause(IceCause::AePandemic)
                        | StrategyKey::Cause(IceCause::PandemicControl)
                );
                if pandemic_cause {
                    errors.push(finding(
                        RuleId::R1,
                        format!(
                            "rule R1: the treatment policy strategy must not be applied to \
                             pandemic-driven events ('{key}'); these deviations are not part of \
                             any treatment regimen of interest"
                        ),
                    ));
                } else if !spec.pragmatic {
                    warnings.push(finding(
                        RuleId::R2,
                        format!(
                            "rule R2: treatment policy for '{key}' outside a pragmatic study; \
                             prefer a hypothetical strategy or declare the event part of the \
                             regimen"
                        ),
                    ));
                }
            }
            _ => {}
        }
    }

    // Summary measure must match the endpoint.
    match (&spec.endpoint, spec.summary) {
        (Endpoint::ContinuousChange, SummaryMeasure::DifferenceInProportions) => {
            errors.push(finding(
                RuleId::SummaryMismatch,
                "difference_in_proportions requires a composite endpoint",
            ));
        }
        (Endpoint::Composite(_), SummaryMeasure::DifferenceInMeans) => {
            errors.push(finding(
                RuleId::SummaryMismatch,
                "a composite endpoint summarizes as difference_in_proportions",
            ));
        }
        _ => {}
    }

    for (key, method) in &spec.imputation {
        if matches!(method.kind, MethodKind::JumpToReference | MethodKind::CopyReference)
            && method.reference == Arm::Experimental
        {
            warnings.push(finding(
                RuleId::ReferenceChoice,
                format!(
                    "{} for '{key}' references the experimental arm; reference-based \
                     imputation usually points at the control arm of a placebo-controlled \
                     study",
                    method.kind
                ),
            ));
        }
    }

    if let Some(s) = scenario {
        // R4: retrieved dropout needs donors observed after their events.
        for (key, method) in &spec.imputation {
            if method.kind != MethodKind::RetrievedDropout {
                continue;
            }
            if let StrategyKey::Cause(cause) = key {
                let channels: Vec<_> = s.hazards.iter().filter(|h| h.cause == *cause).collect();
                let observable = channels
                    .iter()
                    .any(|h| h.kind != IceKind::Death && h.withdraw_prob < 1.0);
                if channels.is_empty() {
                    warnings.push(finding(
                        RuleId::R4,
                        format!(
                            "rule R4: retrieved_dropout for '{cause}' but the scenario \
                             generates no events of this cause; no donors will exist"
                        ),
                    ));
                } else if !observable {
                    warnings.push(finding(
                        RuleId::R4,
                        format!(
                            "rule R4: retrieved_dropout for '{cause}' but every '{cause}' \
                             event withdraws the patient; no post-event observations will \
                             exist to anchor the donor model"
                        ),
                    ));
                }
            }
        }
        // R5: MAR handling of lack-of-efficacy events whose triggering
        // measurement is never collected.
        if spec.strategy_for(IceCause::LackOfEfficacy, IceKind::Discontinuation)
            == Some(IceStrategy::Cdh)
            && s.hazards
                .iter()
                .any(|h| h.cause == IceCause::LackOfEfficacy && h.censor_event_visit)
        {
            warnings.push(finding(
                RuleId::R5,
                "rule R5: lack-of-efficacy events in this scenario censor their triggering \
                 visit, so the efficacy measurement preceding the event is not collected and \
                 MAR is not plausible; add a special-pattern sensitivity analysis",
            ));
        }
    }

    let resolved_plan = if errors.is_empty() {
        Some(NormalizedPlan {
            rows: IceCause::ALL
                .into_iter()
                .map(|cause| PlanRow {
                    cause,
                    strategy: spec.strategies[&StrategyKey::Cause(cause)],
                    // Kind overrides are resolved separately; the row holds
                    // the cause-level method.
                    method: spec
                        .imputation
                        .get(&StrategyKey::Cause(cause))
                        .cloned()
                        .unwrap_or_else(|| MethodSpec::of(MethodKind::Mar)),
                })
                .collect(),
            kind_overrides: spec
                .strategies
                .iter()
                .filter_map(|(k, strategy)| match k {
                    StrategyKey::Kind(kind) => Some((
                        *kind,
                        *strategy,
                        spec.imputation
                            .get(k)
                            .cloned()
                            .unwrap_or_else(|| MethodSpec::of(MethodKind::Mar)),
                    )),
                    StrategyKey::Cause(_) => None,
                })
                .collect(),
            regimen_kinds: spec.regimen_kinds.clone(),
            non_ice_method: spec.non_ice_method.clone(),
            death_delta: spec.death_delta,
        })
    } else {
        None
    };

    ValidationReport { errors, warnings, resolved_plan }
}

/// The default road map: strategies and imputation methods chosen by the
/// cause of the event.
///
/// * adverse events under normal circumstances — no-treatment hypothetical,
///   imputed by return-to-baseline (partial-treatment / retrieved-dropout
///   and jump-to-reference are the named alternates);
/// * pandemic-driven adverse events and control measures — controlled
///   direct hypothetical with MAR imputation;
/// * lack of efficacy — controlled direct hypothetical with MAR imputation
///   (delta / special-pattern as sensitivity analyses);
/// * documented administrative events — controlled direct hypothetical with
///   MAR imputation;
/// * loss to follow-up — controlled direct hypothetical, imputed under a
///   special pattern borrowed from lack-of-efficacy patients;
/// * missingness unrelated to events — MAR imputation.
pub fn default_plan() -> EstimandSpec {
    let mut spec = EstimandSpec { name: "default".to_string(), ..EstimandSpec::default() };
    use IceCause::*;
    use IceStrategy::*;
    for (cause, strategy) in [
        (AeNormal, Nth),
        (AePandemic, Cdh),
        (LackOfEfficacy, Cdh),
        (AdminDocumented, Cdh),
        (AdminLostToFollowUp, Cdh),
        (PandemicControl, Cdh),
    ] {
        spec.strategies.insert(StrategyKey::Cause(cause), strategy);
    }
    for (cause, method) in [
        (AeNormal, MethodSpec::of(MethodKind::ReturnToBaseline)),
        (AePandemic, MethodSpec::of(MethodKind::Mar)),
        (LackOfEfficacy, MethodSpec::of(MethodKind::Mar)),
        (AdminDocumented, MethodSpec::of(MethodKind::Mar)),
        (AdminLostToFollowUp, MethodSpec::special_pattern(LackOfEfficacy)),
        (PandemicControl, MethodSpec::of(MethodKind::Mar)),
    ] {
        spec.imputation.insert(StrategyKey::Cause(cause), method);
    }
    spec
}

/// Named sensitivity configurations: the road map's alternates, emitted as
/// complete specs rather than chosen automatically.
pub fn named_alternates() -> Vec<(String, EstimandSpec)> {
    let mut out = Vec::new();

    let mut pth = default_plan();
    pth.name = "ae-normal-pth-retrieved-dropout".to_string();
    pth.strategies.insert(StrategyKey::Cause(IceCause::AeNormal), IceStrategy::Pth);
    pth.imputation
        .insert(StrategyKey::Cause(IceCause::AeNormal), MethodSpec::of(MethodKind::RetrievedDropout));
    out.push((pth.name.clone(), pth));

    let mut j2r = default_plan();
    j2r.name = "ae-normal-jump-to-reference".to_string();
    j2r.imputation
        .insert(StrategyKey::Cause(IceCause::AeNormal), MethodSpec::of(MethodKind::JumpToReference));
    out.push((j2r.name.clone(), j2r));

    let mut loe = default_plan();
    loe.name = "loe-special-pattern".to_string();
    loe.imputation.insert(
        StrategyKey::Cause(IceCause::LackOfEfficacy),
        MethodSpec::special_pattern(IceCause::LackOfEfficacy),
    );
    out.push((loe.name.clone(), loe));

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::parse_spec;

    #[test]
    fn default_plan_validates_clean() {
        let report = validate_spec(&default_plan(), None);
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        assert!(report.warnings.is_empty(), "{:?}", report.warnings);
        let plan = report.resolved_plan.unwrap();
        assert_eq!(plan.rows.len(), 6);
        assert_eq!(
            plan.strategy_for(IceCause::AePandemic, IceKind::Discontinuation),
            IceStrategy::Cdh
        );
        assert_eq!(
            plan.method_for(IceCause::AdminLostToFollowUp, IceKind::Discontinuation).kind,
            MethodKind::SpecialPattern
        );
    }

    #[test]
    fn alternates_validate_clean() {
        for (name, spec) in named_alternates() {
            let report = validate_spec(&spec, None);
            assert!(report.errors.is_empty(), "{name}: {:?}", report.errors);
        }
    }

    #[test]
    fn treatment_policy_for_pandemic_cause_is_rule_r1() {
        let mut spec = default_plan();
        spec.strategies
            .insert(StrategyKey::Cause(IceCause::PandemicControl), IceStrategy::TreatmentPolicy);
        let report = validate_spec(&spec, None);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].rule, RuleId::R1);
        assert!(report.resolved_plan.is_none());
    }

    #[test]
    fn treatment_policy_elsewhere_warns_unless_pragmatic() {
        let mut spec = default_plan();
        spec.strategies
            .insert(StrategyKey::Cause(IceCause::AdminDocumented), IceStrategy::TreatmentPolicy);
        let report = validate_spec(&spec, None);
        assert!(report.errors.is_empty());
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.warnings[0].rule, RuleId::R2);

        spec.pragmatic = true;
        let report = validate_spec(&spec, None);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn composite_as_strategy_is_rule_r3() {
        let mut spec = default_plan();
        spec.strategies
            .insert(StrategyKey::Cause(IceCause::LackOfEfficacy), IceStrategy::Composite);
        let report = validate_spec(&spec, None);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].rule, RuleId::R3);
        assert!(report.errors[0].message.contains("endpoint"));
    }

    #[test]
    fn circularity_rule_fires() {
        let text = r#"
[regimen]
part_of_regimen = rescue_start

[strategies]
ae_normal = cdh
ae_pandemic = cdh
lack_of_efficacy = cdh
admin_documented = cdh
admin_lost_to_follow_up = cdh
pandemic_control = cdh
rescue_start = cdh
"#;
        let spec = parse_spec(text).unwrap();
        let report = validate_spec(&spec, None);
        assert!(report.errors.iter().any(|f| f.rule == RuleId::Circularity), "{:?}", report.errors);
    }

    #[test]
    fn missing_cause_is_a_coverage_error() {
        let spec = parse_spec("[strategies]\nae_normal = cdh\n").unwrap();
        let report = validate_spec(&spec, None);
        assert_eq!(report.errors.iter().filter(|f| f.rule == RuleId::Coverage).count(), 5);
    }

    #[test]
    fn scenario_dependent_rules_r4_and_r5() {
        use crate::config::testutil::base_toml;
        use crate::config::Scenario;
        let toml = base_toml()
            + r#"
[[hazards]]
cause = "ae_normal"
kind = "discontinuation"
intercept = -2.0
withdraw_prob = 1.0

[[hazards]]
cause = "lack_of_efficacy"
kind = "discontinuation"
intercept = -2.0
coef_latent = 0.8
withdraw_prob = 1.0
censor_event_visit = true
"#;
        let scenario = Scenario::from_toml(&toml).unwrap();
        let mut spec = default_plan();
        spec.imputation
            .insert(StrategyKey::Cause(IceCause::AeNormal), MethodSpec::of(MethodKind::RetrievedDropout));
        let report = validate_spec(&spec, Some(&scenario));
        assert!(report.errors.is_empty());
        assert!(report.warnings.iter().any(|f| f.rule == RuleId::R4), "{:?}", report.warnings);
        assert!(report.warnings.iter().any(|f| f.rule == RuleId::R5), "{:?}", report.warnings);

        // Without the scenario both rules stay silent.
        let report = validate_spec(&spec, None);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn validation_is_idempotent_on_the_resolved_plan() {
        let spec = default_plan();
        let a = validate_spec(&spec, None).resolved_plan.unwrap();
        let b = validate_spec(&spec, None).resolved_plan.unwrap();
        assert_eq!(a, b);
    }
}
