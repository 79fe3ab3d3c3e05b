//! Domain vocabulary shared by all modules: schedules, regimens, potential
//! outcomes, intercurrent events, missingness classes, endpoints.
//!
//! Everything here is a pure value type; records are immutable after
//! construction and safe to share read-only across parallel workers.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("visit schedule needs at least a baseline and one post-baseline visit")]
    ScheduleTooShort,
    #[error("visit schedule times must be strictly increasing")]
    ScheduleNotIncreasing,
    #[error("final-visit value is missing; the endpoint requires imputation first")]
    FinalValueMissing,
}

/// Randomized arm. `Control` is arm 0, `Experimental` is arm 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Experimental,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Experimental];

    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Experimental => 1,
        }
    }

    pub fn from_index(i: usize) -> Arm {
        if i == 0 {
            Arm::Control
        } else {
            Arm::Experimental
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Control => Arm::Experimental,
            Arm::Experimental => Arm::Control,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Discrete assessment schedule. Visit 0 is baseline; the endpoint is read
/// at the final visit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitSchedule {
    times: Vec<usize>,
}

impl VisitSchedule {
    pub fn new(times: Vec<usize>) -> Result<Self, ModelError> {
        if times.len() < 2 {
            return Err(ModelError::ScheduleTooShort);
        }
        if !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(ModelError::ScheduleNotIncreasing);
        }
        Ok(Self { times })
    }

    /// Consecutive visits `0..=final_visit`.
    pub fn consecutive(final_visit: usize) -> Result<Self, ModelError> {
        Self::new((0..=final_visit).collect())
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    /// Number of scheduled assessments, baseline included.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least 2 visits
    }

    pub fn final_visit(&self) -> usize {
        *self.times.last().unwrap()
    }

    /// Post-baseline visit indices `1..=T`.
    pub fn post_baseline(&self) -> impl Iterator<Item = usize> + '_ {
        self.times.iter().copied().skip(1)
    }
}

/// A treatment regimen, the second argument of the potential outcome
/// `Y(assigned, taken)`.
///
/// `DynamicRule` carries the population-level rescue threshold; an actual
/// policy is per-patient behavior and carries no rule parameters. Under the
/// exclusion restriction `Y(1, none) == Y(0, none)`, `NoTreatment` is a
/// single regimen rather than one per assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regimen {
    /// Assigned arm taken in full for the whole study.
    AssignedFull(Arm),
    /// No study treatment from randomization onward.
    NoTreatment,
    /// Assigned arm taken through `stop_visit`, then no access to treatment.
    PartialUntil { arm: Arm, stop_visit: usize },
    /// Whatever the patient actually did: discontinuations, rescues,
    /// interruptions included.
    ActualPolicy(Arm),
    /// Assigned arm plus rescue added by the explicit rule
    /// "start rescue at the first visit where the intermediate exceeds
    /// `threshold`".
    DynamicRule { arm: Arm, threshold: f64 },
}

/// Cause classification of intercurrent events, recorded at collection time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IceCause {
    /// Adverse event arising under ordinary circumstances.
    AeNormal,
    /// Adverse event specific to a pandemic window (e.g. pandemic illness).
    AePandemic,
    LackOfEfficacy,
    /// Administrative reason with documentation (relocation, job change, ...).
    AdminDocumented,
    /// Administrative loss to follow-up without documented reason.
    AdminLostToFollowUp,
    /// Pandemic control measures (site closure, travel restriction, ...).
    PandemicControl,
}

impl IceCause {
    pub const ALL: [IceCause; 6] = [
        IceCause::AeNormal,
        IceCause::AePandemic,
        IceCause::LackOfEfficacy,
        IceCause::AdminDocumented,
        IceCause::AdminLostToFollowUp,
        IceCause::PandemicControl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IceCause::AeNormal => "ae_normal",
            IceCause::AePandemic => "ae_pandemic",
            IceCause::LackOfEfficacy => "lack_of_efficacy",
            IceCause::AdminDocumented => "admin_documented",
            IceCause::AdminLostToFollowUp => "admin_lost_to_follow_up",
            IceCause::PandemicControl => "pandemic_control",
        }
    }

    pub fn parse(s: &str) -> Option<IceCause> {
        IceCause::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Pandemic-specific causes only exist inside a configured pandemic
    /// window.
    pub fn is_pandemic(self) -> bool {
        matches!(self, IceCause::AePandemic | IceCause::PandemicControl)
    }
}

impl fmt::Display for IceCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What kind of deviation the event is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IceKind {
    Discontinuation,
    RescueStart,
    Death,
    ProlongedInterruption,
}

impl IceKind {
    pub const ALL: [IceKind; 4] = [
        IceKind::Discontinuation,
        IceKind::RescueStart,
        IceKind::Death,
        IceKind::ProlongedInterruption,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IceKind::Discontinuation => "discontinuation",
            IceKind::RescueStart => "rescue_start",
            IceKind::Death => "death",
            IceKind::ProlongedInterruption => "prolonged_interruption",
        }
    }

    pub fn parse(s: &str) -> Option<IceKind> {
        IceKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for IceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Effect of an event on data collection under the arm where it occurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataImpact {
    /// Outcome collection continues (an event without missing data).
    Continues,
    /// Collection stops after the event visit; the event visit itself is
    /// still measured.
    StopsAfterVisit,
    /// Collection stops at the event visit; the triggering measurement is
    /// never observed.
    StopsAtVisit,
}

/// One intercurrent event in a patient's (counterfactual) history under one
/// arm. Events at the same visit as a measurement occur after it unless the
/// impact says otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IceEvent {
    pub cause: IceCause,
    pub visit: usize,
    pub kind: IceKind,
    pub impact: DataImpact,
    /// For `ProlongedInterruption`: number of visits without treatment
    /// before resumption. Zero otherwise.
    pub gap_visits: usize,
}

/// One counterfactual trajectory: the outcome the patient would show at
/// every scheduled visit under a regimen.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTrajectory {
    pub regimen: Regimen,
    pub values: Vec<f64>,
}

impl PotentialTrajectory {
    pub fn final_value(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

/// The full counterfactual bundle carried by every generated patient: one
/// trajectory per regimen any configured estimand can ask about.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub assigned_full: [PotentialTrajectory; 2],
    pub no_treatment: PotentialTrajectory,
    pub actual_policy: [PotentialTrajectory; 2],
    pub dynamic_rule: [PotentialTrajectory; 2],
    /// Treatment until the first intercurrent event of that arm, then no
    /// access. Present only for arms with at least one event.
    pub partial_at_first_ice: [Option<PotentialTrajectory>; 2],
}

impl TrajectorySet {
    /// Look up the trajectory for a regimen, if it is part of the bundle.
    pub fn get(&self, regimen: &Regimen) -> Option<&PotentialTrajectory> {
        match *regimen {
            Regimen::AssignedFull(a) => Some(&self.assigned_full[a.index()]),
            Regimen::NoTreatment => Some(&self.no_treatment),
            Regimen::ActualPolicy(a) => Some(&self.actual_policy[a.index()]),
            Regimen::DynamicRule { arm, .. } => Some(&self.dynamic_rule[arm.index()]),
            Regimen::PartialUntil { arm, stop_visit } => {
                let t = self.partial_at_first_ice[arm.index()].as_ref()?;
                match t.regimen {
                    Regimen::PartialUntil { stop_visit: s, .. } if s == stop_visit => Some(t),
                    _ => None,
                }
            }
        }
    }
}

/// Why an intended measurement is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MissingReason {
    /// Collection stopped by an intercurrent event; carries its cause.
    Ice { cause: IceCause, kind: IceKind },
    /// Missing for reasons unrelated to any intercurrent event.
    NonIce,
}

impl MissingReason {
    pub fn code(&self) -> String {
        match self {
            MissingReason::Ice { cause, kind } => format!("ice:{cause}:{kind}"),
            MissingReason::NonIce => "non_ice".to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<MissingReason> {
        if s == "non_ice" {
            return Some(MissingReason::NonIce);
        }
        let mut it = s.split(':');
        if it.next()? != "ice" {
            return None;
        }
        let cause = IceCause::parse(it.next()?)?;
        let kind = IceKind::parse(it.next()?)?;
        Some(MissingReason::Ice { cause, kind })
    }
}

/// One cell of the observed dataset. Every missing cell carries a reason.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Obs {
    Value(f64),
    Missing(MissingReason),
}

impl Obs {
    pub fn value(&self) -> Option<f64> {
        match self {
            Obs::Value(v) => Some(*v),
            Obs::Missing(_) => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Obs::Missing(_))
    }
}

/// One subject: counterfactual trajectory bundle, per-arm event histories,
/// and the data actually observed under the assigned arm.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: u32,
    pub baseline_covariate: f64,
    pub assigned_arm: Arm,
    pub trajectories: TrajectorySet,
    /// Counterfactual event processes, one list per arm, time-ordered.
    pub ice_history: [Vec<IceEvent>; 2],
    /// Shared standardized residual realization, one value per visit.
    /// Identical across all of the patient's regimens.
    pub residuals: Vec<f64>,
    /// Potential value of the stratum variable under full adherence to the
    /// experimental arm.
    pub ps_variable: f64,
    /// Observed data under the assigned arm, one cell per visit.
    pub observed: Vec<Obs>,
}

impl PatientRecord {
    /// Event indicator for an arm: 1 if the patient has at least one
    /// intercurrent event under that arm.
    pub fn ice_indicator(&self, arm: Arm) -> u8 {
        u8::from(!self.ice_history[arm.index()].is_empty())
    }

    /// Visit of the first intercurrent event under an arm, if any.
    pub fn first_ice_visit(&self, arm: Arm) -> Option<usize> {
        self.ice_history[arm.index()].first().map(|e| e.visit)
    }

    /// Visit of the first death under an arm, if any.
    pub fn death_visit(&self, arm: Arm) -> Option<usize> {
        self.ice_history[arm.index()]
            .iter()
            .find(|e| e.kind == IceKind::Death)
            .map(|e| e.visit)
    }

    /// Post-baseline intermediate values under an arm (the on-treatment
    /// latent outcome that treatment-change rules react to).
    pub fn intermediate(&self, arm: Arm) -> &[f64] {
        &self.trajectories.assigned_full[arm.index()].values[1..]
    }
}

/// Missing-data mechanism classes.
///
/// The classes form a lattice: `Mcar ⊂ CovMar ⊂ Mar`, while `Mnar` is the
/// complement of `Mar`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingnessClass {
    Mnar,
    Mar,
    CovMar,
    Mcar,
}

impl MissingnessClass {
    /// Whether a generator labeled `self` also satisfies the predicate of
    /// `other` (e.g. every MCAR generator is MAR).
    pub fn satisfies(self, other: MissingnessClass) -> bool {
        use MissingnessClass::*;
        match (self, other) {
            (a, b) if a == b => true,
            (Mcar, CovMar) | (Mcar, Mar) | (CovMar, Mar) => true,
            _ => false,
        }
    }
}

/// Direction in which the final-visit outcome counts as success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessDirection {
    /// Success when the final value is at most the threshold
    /// (lower outcome = better).
    AtMost,
    /// Success when the final value is at least the threshold.
    AtLeast,
}

/// A success/failure endpoint whose components include post-randomization
/// events: success requires the outcome criterion at the final visit and
/// the absence of any disqualifying event before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeEndpoint {
    pub threshold: f64,
    pub direction: SuccessDirection,
    /// Event kinds that force failure regardless of the outcome value.
    pub failure_kinds: Vec<IceKind>,
    /// Event causes that force failure regardless of the outcome value.
    pub failure_causes: Vec<IceCause>,
}

impl CompositeEndpoint {
    fn value_meets(&self, value: f64) -> bool {
        match self.direction {
            SuccessDirection::AtMost => value <= self.threshold,
            SuccessDirection::AtLeast => value >= self.threshold,
        }
    }

    fn is_failure_event(&self, e: &IceEvent) -> bool {
        self.failure_kinds.contains(&e.kind) || self.failure_causes.contains(&e.cause)
    }

    /// Composite success evaluated on the counterfactual actual-policy
    /// trajectory and event history of `arm`. Death anywhere before the
    /// final visit is always failure.
    pub fn success_oracle(&self, patient: &PatientRecord, arm: Arm, final_visit: usize) -> bool {
        let disqualified = patient.ice_history[arm.index()]
            .iter()
            .any(|e| e.visit < final_visit && (e.kind == IceKind::Death || self.is_failure_event(e)));
        if disqualified {
            return false;
        }
        self.value_meets(patient.trajectories.actual_policy[arm.index()].values[final_visit])
    }

    /// Composite success evaluated on observed data under the assigned arm.
    /// A missing final value means the endpoint cannot be computed yet and
    /// the dataset needs imputation first.
    pub fn success_observed(
        &self,
        patient: &PatientRecord,
        final_visit: usize,
    ) -> Result<bool, ModelError> {
        let arm = patient.assigned_arm;
        let disqualified = patient.ice_history[arm.index()]
            .iter()
            .any(|e| e.visit < final_visit && (e.kind == IceKind::Death || self.is_failure_event(e)));
        if disqualified {
            return Ok(false);
        }
        let value = patient.observed[final_visit]
            .value()
            .ok_or(ModelError::FinalValueMissing)?;
        Ok(self.value_meets(value))
    }
}
