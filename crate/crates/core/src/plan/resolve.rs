//! Per-patient resolution: which observed values an estimand may use, which
//! cells must be imputed, and with which method.
//!
//! Strategies compose by discard dominance. A hypothetical strategy that
//! discards data from visit `v` discards all later observed values for
//! estimand purposes; no later-applying strategy reinstates them. The
//! no-treatment hypothetical discards from the event visit itself (even the
//! triggering visit is not the outcome of interest), the controlled direct
//! hypothetical keeps the event visit (treatment was still taken when it
//! was measured) and discards afterwards, while the partial-treatment
//! hypothetical, treatment policy, and dynamic regimens keep post-event
//! observations.

use super::{EstimandSpec, IceStrategy, MethodSpec, NormalizedPlan};
use crate::model::{IceCause, IceKind, MissingReason, Obs, PatientRecord};

/// Handling decision for one post-baseline visit.
///
/// Decisions that impute carry the cause of the governing event (when there
/// is one); donor-based methods key their donor pools on it.
#[derive(Debug, Clone, PartialEq)]
pub enum VisitDecision {
    /// The observed value is the potential outcome of interest.
    UseObserved,
    /// Observed-but-off-regimen or missing; fill with the given method.
    DiscardAndImpute { method: MethodSpec, cause: Option<IceCause> },
    /// A cell at or after a death: filled with the given method and subject
    /// to the death sensitivity shift.
    DeadCell { method: MethodSpec, cause: Option<IceCause> },
}

impl VisitDecision {
    pub fn method(&self) -> Option<&MethodSpec> {
        match self {
            VisitDecision::UseObserved => None,
            VisitDecision::DiscardAndImpute { method, .. } | VisitDecision::DeadCell { method, .. } => {
                Some(method)
            }
        }
    }
}

/// Per-visit decisions for one patient, visits `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientHandling {
    pub decisions: Vec<VisitDecision>,
}

impl PatientHandling {
    pub fn decision(&self, visit: usize) -> &VisitDecision {
        &self.decisions[visit - 1]
    }
}

/// First visit from which a strategy discards observed data, for an event
/// at `visit`. `None` when the strategy keeps post-event observations.
fn discard_from(strategy: IceStrategy, visit: usize) -> Option<usize> {
    match strategy {
        IceStrategy::Nth => Some(visit),
        IceStrategy::Cdh => Some(visit + 1),
        IceStrategy::Pth | IceStrategy::TreatmentPolicy | IceStrategy::Dtr => None,
        // Rejected by validation; unreachable behind a NormalizedPlan.
        IceStrategy::Composite | IceStrategy::PrincipalStratum => None,
    }
}

/// Resolve one patient against a normalized plan.
pub fn resolve_patient(p: &PatientRecord, plan: &NormalizedPlan, final_visit: usize) -> PatientHandling {
    let arm = p.assigned_arm;
    let events: Vec<_> = p.ice_history[arm.index()]
        .iter()
        .filter(|e| !plan.regimen_kinds.contains(&e.kind))
        .collect();
    let death_visit = events.iter().find(|e| e.kind == IceKind::Death).map(|e| e.visit);

    let decisions = (1..=final_visit)
        .map(|v| {
            let dead = death_visit.is_some_and(|d| v >= d);
            // Earliest event whose discard window covers this visit governs
            // the cell.
            let governing = events.iter().find(|e| {
                discard_from(plan.strategy_for(e.cause, e.kind), e.visit).is_some_and(|from| v >= from)
            });
            if let Some(e) = governing {
                let method = plan.method_for(e.cause, e.kind).clone();
                let cause = Some(e.cause);
                return if dead {
                    VisitDecision::DeadCell { method, cause }
                } else {
                    VisitDecision::DiscardAndImpute { method, cause }
                };
            }
            match p.observed[v] {
                Obs::Value(_) => VisitDecision::UseObserved,
                Obs::Missing(reason) => {
                    let (method, cause) = match reason {
                        MissingReason::NonIce => (plan.non_ice_method.clone(), None),
                        MissingReason::Ice { cause, kind } => {
                            if plan.regimen_kinds.contains(&kind) {
                                // Missing after an on-regimen event is
                                // protocol-consistent missingness.
                                (plan.non_ice_method.clone(), None)
                            } else {
                                (plan.method_for(cause, kind).clone(), Some(cause))
                            }
                        }
                    };
                    if dead {
                        VisitDecision::DeadCell { method, cause }
                    } else {
                        VisitDecision::DiscardAndImpute { method, cause }
                    }
                }
            }
        })
        .collect();
    PatientHandling { decisions }
}

/// Resolve against a raw spec; errors when a cause lacks a strategy.
pub fn resolve_patient_strategy(
    p: &PatientRecord,
    spec: &EstimandSpec,
    final_visit: usize,
) -> Result<PatientHandling, String> {
    for e in &p.ice_history[p.assigned_arm.index()] {
        if !spec.regimen_kinds.contains(&e.kind) && spec.strategy_for(e.cause, e.kind).is_none() {
            return Err(format!("ICE cause '{}' is missing from the strategy map", e.cause));
        }
    }
    let report = super::validate_spec(spec, None);
    match report.resolved_plan {
        Some(plan) => Ok(resolve_patient(p, &plan, final_visit)),
        None => Err(report
            .errors
            .first()
            .map(|f| f.to_string())
            .unwrap_or_else(|| "invalid spec".to_string())),
    }
}
