//! Patient and replicate generation from a [`Scenario`], and the
//! observation model that turns counterfactual bundles into observed data.
//!
//! Construction is rank-preserving: one standardized residual vector is
//! drawn per patient and reused across every regimen's trajectory, so
//! individual treatment contrasts are deterministic given the draw.
//! Counterfactual event processes are drawn per arm from the cause-specific
//! hazards evaluated on that arm's evolving latent trajectory, with the
//! underlying uniforms shared across arms.

use crate::config::{HazardSpec, Scenario};
use crate::model::{
    Arm, DataImpact, IceEvent, IceKind, MissingReason, MissingnessClass, Obs, PatientRecord,
    PotentialTrajectory, Regimen, TrajectorySet,
};
use crate::rng::{derive_rng, grid};
use rand::Rng;
use rand_distr::StandardNormal;

/// Consequences of a set of events for a trajectory's mean profile.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyState {
    /// Permanent treatment stop: on-treatment means decay from this visit.
    pub stop: Option<usize>,
    /// Rescue start: the rescue shift applies at every later visit.
    pub rescue: Option<usize>,
    /// Temporary interruptions `(start, gap)`: treatment is off during
    /// `(start, start + gap]` and resumes afterwards.
    pub interruptions: Vec<(usize, usize)>,
}

/// Mean outcome at `visit` for a patient on `arm` whose treatment history
/// is summarized by `state`. Visit 0 is the shared baseline mean.
pub fn policy_mean(s: &Scenario, arm: Arm, visit: usize, state: &PolicyState) -> f64 {
    if visit == 0 {
        return s.baseline_mean();
    }
    let mu = s.on_treatment_mean(arm, visit);
    let no = s.no_treatment_mean(visit);
    let mut m = match state.stop {
        Some(stop) if visit > stop => decayed(s, mu, no, visit - stop),
        _ => {
            let active = state
                .interruptions
                .iter()
                .rev()
                .find(|(start, gap)| visit > *start && visit <= start + gap);
            match active {
                Some((start, _)) => decayed(s, mu, no, visit - start),
                None => mu,
            }
        }
    };
    if let Some(r) = state.rescue {
        if visit > r {
            m += s.rescue_effect;
        }
    }
    m
}

/// Geometric decay from the on-treatment mean toward the no-treatment mean,
/// `k` visits after treatment stopped.
fn decayed(s: &Scenario, mu: f64, no: f64, k: usize) -> f64 {
    no + s.washout.powi(k as i32) * (mu - no)
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Pre-drawn randomness for one patient. Fixed-size so arms share the same
/// uniforms and the stream layout never depends on what happened.
struct PatientDraws {
    z: Vec<f64>,
    u_event: Vec<Vec<f64>>,    // [visit-1][channel]
    u_withdraw: Vec<Vec<f64>>, // [visit-1][channel]
    u_miss: Vec<f64>,          // [visit-1]
}

impl PatientDraws {
    fn draw(s: &Scenario, rng: &mut impl Rng) -> Self {
        let t = s.final_visit();
        let c = s.hazards.len();
        let z = (0..=t).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let u_event = (0..t).map(|_| (0..c).map(|_| rng.gen::<f64>()).collect()).collect();
        let u_withdraw = (0..t).map(|_| (0..c).map(|_| rng.gen::<f64>()).collect()).collect();
        let u_miss = (0..t).map(|_| rng.gen::<f64>()).collect();
        Self { z, u_event, u_withdraw, u_miss }
    }
}

/// Correlated residuals on the value grid: `grid(L z)`.
fn residuals(s: &Scenario, z: &[f64]) -> Vec<f64> {
    let l = s.chol();
    (0..z.len())
        .map(|i| grid((0..=i).map(|j| l[i][j] * z[j]).sum::<f64>()))
        .collect()
}

/// One arm's simulated event history and the resulting policy state.
fn simulate_events(s: &Scenario, arm: Arm, e: &[f64], draws: &PatientDraws) -> (Vec<IceEvent>, PolicyState) {
    let t_final = s.final_visit();
    let mut state = PolicyState::default();
    let mut events = Vec::new();
    let mut discontinued = false;
    let mut rescued = false;
    let mut dead = false;
    let mut interrupted_until = 0usize;

    for t in 1..=t_final {
        if dead {
            break;
        }
        let latent = policy_mean(s, arm, t, &state) + e[t];
        for (ci, ch) in s.hazards.iter().enumerate() {
            if !s.channel_active(ch, t) {
                continue;
            }
            let applicable = match ch.kind {
                IceKind::Discontinuation => !discontinued,
                IceKind::RescueStart => !rescued,
                IceKind::Death => true,
                IceKind::ProlongedInterruption => !discontinued && t > interrupted_until,
            };
            if !applicable {
                continue;
            }
            let p = logistic(ch.intercept + ch.coef_latent * latent + ch.coef_arm * arm.index() as f64);
            if draws.u_event[t - 1][ci] >= p {
                continue;
            }
            let impact = if ch.kind == IceKind::Death || draws.u_withdraw[t - 1][ci] < ch.withdraw_prob {
                if ch.censor_event_visit {
                    DataImpact::StopsAtVisit
                } else {
                    DataImpact::StopsAfterVisit
                }
            } else {
                DataImpact::Continues
            };
            events.push(IceEvent {
                cause: ch.cause,
                visit: t,
                kind: ch.kind,
                impact,
                gap_visits: ch.gap_visits,
            });
            match ch.kind {
                IceKind::Discontinuation => {
                    discontinued = true;
                    state.stop = Some(state.stop.map_or(t, |s0| s0.min(t)));
                }
                IceKind::RescueStart => {
                    rescued = true;
                    state.rescue = Some(t);
                }
                IceKind::Death => {
                    dead = true;
                    state.stop = Some(state.stop.map_or(t, |s0| s0.min(t)));
                }
                IceKind::ProlongedInterruption => {
                    interrupted_until = t + ch.gap_visits;
                    state.interruptions.push((t, ch.gap_visits));
                }
            }
            if dead {
                break;
            }
        }
    }
    (events, state)
}

/// Build a trajectory from a mean rule plus the shared residuals.
fn trajectory_from_state(
    s: &Scenario,
    arm: Arm,
    regimen: Regimen,
    state: &PolicyState,
    e: &[f64],
) -> PotentialTrajectory {
    let values = (0..=s.final_visit())
        .map(|t| policy_mean(s, arm, t, state) + e[t])
        .collect();
    PotentialTrajectory { regimen, values }
}

/// Generate one patient: shared residual draw, per-arm counterfactual event
/// processes, the full trajectory bundle, and observed data under the
/// assigned arm.
pub fn generate_patient(s: &Scenario, id: u32, assigned_arm: Arm, rng: &mut impl Rng) -> PatientRecord {
    let t_final = s.final_visit();
    let draws = PatientDraws::draw(s, rng);
    let e = residuals(s, &draws.z);
    let no_state = PolicyState::default();

    let assigned_full = [
        trajectory_from_state(s, Arm::Control, Regimen::AssignedFull(Arm::Control), &no_state, &e),
        trajectory_from_state(s, Arm::Experimental, Regimen::AssignedFull(Arm::Experimental), &no_state, &e),
    ];

    let no_treatment = PotentialTrajectory {
        regimen: Regimen::NoTreatment,
        values: (0..=t_final)
            .map(|t| if t == 0 { s.baseline_mean() } else { s.no_treatment_mean(t) } + e[t])
            .collect(),
    };

    let mut ice_history: [Vec<IceEvent>; 2] = [Vec::new(), Vec::new()];
    let mut actual_policy = Vec::with_capacity(2);
    let mut partial: [Option<PotentialTrajectory>; 2] = [None, None];
    for arm in Arm::BOTH {
        let (events, state) = simulate_events(s, arm, &e, &draws);
        actual_policy.push(trajectory_from_state(s, arm, Regimen::ActualPolicy(arm), &state, &e));
        if let Some(first) = events.first() {
            let stop_visit = first.visit;
            let partial_state = PolicyState { stop: Some(stop_visit), ..Default::default() };
            partial[arm.index()] = Some(trajectory_from_state(
                s,
                arm,
                Regimen::PartialUntil { arm, stop_visit },
                &partial_state,
                &e,
            ));
        }
        ice_history[arm.index()] = events;
    }
    let actual_policy: [PotentialTrajectory; 2] = actual_policy.try_into().unwrap();

    let dynamic_rule = Arm::BOTH.map(|arm| {
        let trigger = (1..=t_final).find(|&v| assigned_full[arm.index()].values[v] > s.dtr_threshold);
        let state = PolicyState { rescue: trigger, ..Default::default() };
        trajectory_from_state(s, arm, Regimen::DynamicRule { arm, threshold: s.dtr_threshold }, &state, &e)
    });

    let ps_variable = assigned_full[Arm::Experimental.index()].values[s.ps_visit];
    let baseline_covariate = assigned_full[0].values[0];

    let mut patient = PatientRecord {
        id,
        baseline_covariate,
        assigned_arm,
        trajectories: TrajectorySet {
            assigned_full,
            no_treatment,
            actual_policy,
            dynamic_rule,
            partial_at_first_ice: partial,
        },
        ice_history,
        residuals: e,
        ps_variable,
        observed: Vec::new(),
    };
    observe_patient(&mut patient, s, &draws.u_miss);
    patient
}

/// Fill the observed column of one patient from its actual-policy
/// trajectory, event history, and non-event missingness draws.
fn observe_patient(p: &mut PatientRecord, s: &Scenario, u_miss: &[f64]) {
    let t_final = s.final_visit();
    let arm = p.assigned_arm;
    // Earliest collection cutoff among data-stopping events; ties go to the
    // earlier event.
    let cutoff = p.ice_history[arm.index()]
        .iter()
        .filter_map(|e| match e.impact {
            DataImpact::Continues => None,
            DataImpact::StopsAfterVisit => Some((e.visit + 1, e)),
            DataImpact::StopsAtVisit => Some((e.visit, e)),
        })
        .min_by_key(|(cut, _)| *cut);

    let values = &p.trajectories.actual_policy[arm.index()].values;
    p.observed = (0..=t_final)
        .map(|v| {
            if v == 0 {
                return Obs::Value(values[0]);
            }
            if let Some((cut, e)) = cutoff {
                if v >= cut {
                    return Obs::Missing(MissingReason::Ice { cause: e.cause, kind: e.kind });
                }
            }
            if u_miss[v - 1] < s.extra_missingness {
                return Obs::Missing(MissingReason::NonIce);
            }
            Obs::Value(values[v])
        })
        .collect();
}

/// Re-apply the observation model to already-generated patients, drawing
/// fresh non-event missingness.
pub fn apply_observation_model(patients: &mut [PatientRecord], s: &Scenario, rng: &mut impl Rng) {
    let t = s.final_visit();
    for p in patients.iter_mut() {
        let u_miss: Vec<f64> = (0..t).map(|_| rng.gen::<f64>()).collect();
        observe_patient(p, s, &u_miss);
    }
}

/// Generate one replicate: `2 * n_per_arm` patients under 1:1 allocation.
/// The RNG stream is derived from `(scenario seed, replicate_index)`, so the
/// result is identical regardless of execution order or parallelism.
pub fn generate_replicate(s: &Scenario, replicate_index: u64) -> Vec<PatientRecord> {
    let mut rng = derive_rng("replicate", &[s.seed, replicate_index]);
    (0..2 * s.n_per_arm)
        .map(|i| {
            let arm = if i % 2 == 0 { Arm::Control } else { Arm::Experimental };
            generate_patient(s, i as u32, arm, &mut rng)
        })
        .collect()
}

/// The missingness class the scenario's design induces.
///
/// Classification looks at the channels able to stop data collection (plus
/// death, which always does): dependence on the current latent outcome is
/// MAR while the triggering visit is still collected, MNAR when the channel
/// censors its own trigger; dependence on arm alone is covariate-dependent
/// MAR; no dependence at all is MCAR.
pub fn mechanism_class(s: &Scenario) -> MissingnessClass {
    let stopping: Vec<&HazardSpec> = s
        .hazards
        .iter()
        .filter(|h| h.kind == IceKind::Death || h.withdraw_prob > 0.0)
        .collect();
    if stopping.iter().any(|h| h.coef_latent != 0.0 && h.censor_event_visit) {
        MissingnessClass::Mnar
    } else if stopping.iter().any(|h| h.coef_latent != 0.0) {
        MissingnessClass::Mar
    } else if stopping.iter().any(|h| h.coef_arm != 0.0) {
        MissingnessClass::CovMar
    } else {
        MissingnessClass::Mcar
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::testutil::{base_scenario, base_toml};
    use crate::config::Scenario;

    fn with_hazard(extra: &str) -> Scenario {
        Scenario::from_toml(&(base_toml() + extra)).unwrap()
    }

    #[test]
    fn partial_until_boundaries_in_washout() {
        // lambda = 0: exactly the no-treatment mean plus residual after stop.
        let s0 = Scenario::from_toml(&base_toml().replace("washout = 0.5", "washout = 0.0")).unwrap();
        let state = PolicyState { stop: Some(2), ..Default::default() };
        for t in 0..=4 {
            let expect = if t <= 2 {
                s0.on_treatment_mean(Arm::Experimental, t)
            } else {
                s0.no_treatment_mean(t)
            };
            assert_eq!(policy_mean(&s0, Arm::Experimental, t, &state), expect);
        }
        // lambda = 1: identical to full treatment at all visits.
        let s1 = Scenario::from_toml(&base_toml().replace("washout = 0.5", "washout = 1.0")).unwrap();
        for t in 0..=4 {
            assert_eq!(
                policy_mean(&s1, Arm::Experimental, t, &state),
                s1.on_treatment_mean(Arm::Experimental, t)
            );
        }
    }

    #[test]
    fn zero_hazards_make_actual_policy_equal_full_assignment() {
        let s = base_scenario();
        let patients = generate_replicate(&s, 0);
        assert_eq!(patients.len(), 200);
        for p in &patients {
            for arm in Arm::BOTH {
                assert!(p.ice_history[arm.index()].is_empty());
                assert_eq!(
                    p.trajectories.actual_policy[arm.index()].values,
                    p.trajectories.assigned_full[arm.index()].values
                );
            }
            // Complete observation; observed equals the trajectory exactly.
            for (v, cell) in p.observed.iter().enumerate() {
                assert_eq!(
                    cell.value().unwrap(),
                    p.trajectories.assigned_full[p.assigned_arm.index()].values[v]
                );
            }
        }
        let per_arm = patients.iter().filter(|p| p.assigned_arm == Arm::Control).count();
        assert_eq!(per_arm, 100);
    }

    #[test]
    fn baseline_is_shared_across_all_regimens() {
        let s = base_scenario();
        let p = &generate_replicate(&s, 3)[0];
        let b = p.baseline_covariate;
        assert_eq!(p.trajectories.no_treatment.values[0], b);
        for arm in Arm::BOTH {
            assert_eq!(p.trajectories.assigned_full[arm.index()].values[0], b);
            assert_eq!(p.trajectories.actual_policy[arm.index()].values[0], b);
            assert_eq!(p.trajectories.dynamic_rule[arm.index()].values[0], b);
        }
    }

    #[test]
    fn replicates_are_deterministic_and_streams_disjoint() {
        let s = base_scenario();
        let a = generate_replicate(&s, 5);
        let b = generate_replicate(&s, 5);
        assert_eq!(a, b);
        let c = generate_replicate(&s, 6);
        assert_ne!(a[0].residuals, c[0].residuals);
    }

    #[test]
    fn death_stops_collection_after_its_visit() {
        // A deterministic death at visit 2 (saturated hazard inside a
        // two-sided latent coefficient of zero).
        let s = with_hazard(
            r#"
[[hazards]]
cause = "ae_normal"
kind = "death"
intercept = -800.0
"#,
        );
        // Manually force an event history instead of relying on hazards.
        let mut p = generate_replicate(&s, 0)[0].clone();
        p.ice_history[p.assigned_arm.index()] = vec![IceEvent {
            cause: crate::model::IceCause::AeNormal,
            visit: 2,
            kind: IceKind::Death,
            impact: DataImpact::StopsAfterVisit,
            gap_visits: 0,
        }];
        let u_miss = vec![1.0; 4];
        observe_patient(&mut p, &s, &u_miss);
        assert!(p.observed[2].value().is_some());
        for v in 3..=4 {
            match p.observed[v] {
                Obs::Missing(MissingReason::Ice { cause, kind }) => {
                    assert_eq!(cause, crate::model::IceCause::AeNormal);
                    assert_eq!(kind, IceKind::Death);
                }
                _ => panic!("expected missing with death reason at visit {v}"),
            }
        }
    }

    #[test]
    fn interruption_without_withdrawal_keeps_outcomes_observed() {
        let toml = base_toml().replace("seed = 7", "seed = 7\nprolonged_interruption_min = 2")
            + r#"
[pandemic]
start = 1
end = 2

[[hazards]]
cause = "pandemic_control"
kind = "prolonged_interruption"
intercept = 800.0
gap_visits = 2
"#;
        let s = Scenario::from_toml(&toml).unwrap();
        let patients = generate_replicate(&s, 1);
        let with_event: Vec<_> = patients
            .iter()
            .filter(|p| p.ice_indicator(p.assigned_arm) == 1)
            .collect();
        assert!(!with_event.is_empty());
        for p in with_event {
            // Event recorded but every visit still observed.
            assert!(p.observed.iter().all(|o| !o.is_missing()));
            // The trajectory dips toward no-treatment during the gap and
            // returns to the on-treatment mean after resumption.
            let e = &p.ice_history[p.assigned_arm.index()][0];
            assert_eq!(e.kind, IceKind::ProlongedInterruption);
            assert_eq!(e.visit, 1);
            let after_gap = e.visit + e.gap_visits + 1; // visit 4
            let arm = p.assigned_arm;
            assert_eq!(
                p.trajectories.actual_policy[arm.index()].values[after_gap],
                p.trajectories.assigned_full[arm.index()].values[after_gap]
            );
        }
    }

    #[test]
    fn saturated_hazard_hits_every_patient_on_both_arms() {
        let s = with_hazard(
            r#"
[[hazards]]
cause = "admin_documented"
kind = "discontinuation"
intercept = 800.0
"#,
        );
        let patients = generate_replicate(&s, 0);
        for p in &patients {
            assert_eq!(p.ice_indicator(Arm::Control), 1);
            assert_eq!(p.ice_indicator(Arm::Experimental), 1);
            assert_eq!(p.first_ice_visit(Arm::Control), Some(1));
        }
    }

    #[test]
    fn monte_carlo_mean_matches_configured_mean() {
        let s = Scenario::from_toml(&base_toml().replace("n_per_arm = 100", "n_per_arm = 4000")).unwrap();
        let patients = generate_replicate(&s, 0);
        for arm in Arm::BOTH {
            let finals: Vec<f64> = patients
                .iter()
                .filter(|p| p.assigned_arm == arm)
                .map(|p| p.observed[4].value().unwrap())
                .collect();
            let n = finals.len() as f64;
            let mean = finals.iter().sum::<f64>() / n;
            let se = s.residual_sd(4) / n.sqrt();
            let target = s.on_treatment_mean(arm, 4);
            assert!(
                (mean - target).abs() < 4.0 * se,
                "arm {arm}: mean {mean} vs {target} (se {se})"
            );
        }
    }

    #[test]
    fn extra_missingness_rate_is_respected() {
        let s = Scenario::from_toml(
            &base_toml()
                .replace("n_per_arm = 100", "n_per_arm = 2000")
                .replace("rescue_effect = 0.8", "rescue_effect = 0.8\nextra_missingness = 0.3"),
        )
        .unwrap();
        let patients = generate_replicate(&s, 0);
        let cells: usize = patients.len() * 4;
        let missing: usize = patients
            .iter()
            .map(|p| p.observed[1..].iter().filter(|o| o.is_missing()).count())
            .sum();
        let rate = missing as f64 / cells as f64;
        assert!((rate - 0.3).abs() < 0.02, "rate {rate}");
        // Every missing cell carries the non-event reason.
        for p in &patients {
            for o in &p.observed {
                if let Obs::Missing(r) = o {
                    assert_eq!(*r, MissingReason::NonIce);
                }
            }
        }
    }

    #[test]
    fn observation_model_reapplies_over_generated_patients() {
        use crate::rng::derive_rng;
        let toml = base_toml().replace(
            "rescue_effect = 0.8",
            "rescue_effect = 0.8\nextra_missingness = 0.25",
        );
        let s = Scenario::from_toml(&toml).unwrap();
        let mut patients = generate_replicate(&s, 2);
        let mut rng = derive_rng("reobserve", &[1]);
        apply_observation_model(&mut patients, &s, &mut rng);
        for p in &patients {
            assert_eq!(p.observed.len(), 5);
            assert!(!p.observed[0].is_missing(), "baseline is always observed");
            for (v, cell) in p.observed.iter().enumerate() {
                if let Obs::Value(y) = cell {
                    assert_eq!(
                        *y,
                        p.trajectories.actual_policy[p.assigned_arm.index()].values[v]
                    );
                }
            }
        }
        let missing: usize = patients
            .iter()
            .flat_map(|p| &p.observed[1..])
            .filter(|o| o.is_missing())
            .count();
        assert!(missing > 0);
    }

    #[test]
    fn mechanism_classifier_covers_the_lattice() {
        let mcar = with_hazard(
            "\n[[hazards]]\ncause = \"admin_documented\"\nkind = \"discontinuation\"\nintercept = -2.0\nwithdraw_prob = 1.0\n",
        );
        assert_eq!(mechanism_class(&mcar), MissingnessClass::Mcar);

        let covmar = with_hazard(
            "\n[[hazards]]\ncause = \"admin_documented\"\nkind = \"discontinuation\"\nintercept = -2.0\ncoef_arm = 0.5\nwithdraw_prob = 1.0\n",
        );
        assert_eq!(mechanism_class(&covmar), MissingnessClass::CovMar);

        let mar = with_hazard(
            "\n[[hazards]]\ncause = \"lack_of_efficacy\"\nkind = \"discontinuation\"\nintercept = -2.0\ncoef_latent = 0.8\nwithdraw_prob = 1.0\n",
        );
        assert_eq!(mechanism_class(&mar), MissingnessClass::Mar);

        let mnar = with_hazard(
            "\n[[hazards]]\ncause = \"lack_of_efficacy\"\nkind = \"discontinuation\"\nintercept = -2.0\ncoef_latent = 0.8\nwithdraw_prob = 1.0\ncensor_event_visit = true\n",
        );
        assert_eq!(mechanism_class(&mnar), MissingnessClass::Mnar);
        assert!(mechanism_class(&mcar).satisfies(MissingnessClass::Mar));
    }
}
