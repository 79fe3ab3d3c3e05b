//! Multiple-imputation engines and pooling.
//!
//! The engine fills every cell a resolved plan marks as a target, per
//! method:
//!
//! * `mar` — own-arm sequential regressions of each visit on baseline and
//!   all earlier visits, with proper posterior draws per copy;
//! * `return_to_baseline` — mean anchored at the patient's own baseline,
//!   variance from the posterior of the own-arm visit-on-baseline
//!   regression (this is imputation, not carrying the baseline forward);
//! * `retrieved_dropout` — the sequential model fit only on same-arm
//!   patients with the same event cause who remained observed after the
//!   event and took no rescue;
//! * `jump_to_reference` — reference-arm model from the event onward, with
//!   pre-event history mapped from the patient's own mean profile onto the
//!   reference profile (baseline is pre-treatment and never mapped);
//! * `copy_reference` — reference-arm model applied to the patient's raw
//!   history, so pre-event advantage persists as residual;
//! * `special_pattern` — sequential models fit on the declared donor
//!   cause's patients using their raw observed values.
//!
//! Every stochastic stream is derived from `(seed, copy, patient)` for cell
//! noise and `(seed, visit, fit-data digest)` for posterior draws, so
//! results are independent of thread count and of arm labels.

mod regress;
pub mod pool;

pub use pool::{pool, PoolError, PooledEstimate};
pub use regress::{FitError, LinearModel, PosteriorDraw};

use crate::model::{Arm, IceCause, IceKind, Obs, PatientRecord};
use crate::plan::{MethodKind, MethodSpec, NormalizedPlan, VisitDecision};
use crate::rng::{derive_rng, derive_rng_digest, grid};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImputeError {
    #[error("need at least 2 imputations, got {0}")]
    TooFewImputations(usize),
    #[error("no retrieved dropouts for cause {0}")]
    NoDonors(IceCause),
    #[error("no donor-pattern patients for cause {0}")]
    NoPatternDonors(IceCause),
    #[error("{context}: need at least {needed} complete cases, got {got}")]
    Insufficient { context: String, needed: usize, got: usize },
    #[error("{context}: design is rank deficient")]
    RankDeficient { context: String },
    #[error("retrieved_dropout needs an event cause, but the cell has none")]
    RetrievedWithoutCause,
    #[error("cannot shift observed cell (patient index {patient}, visit {visit})")]
    DeltaOnObserved { patient: usize, visit: usize },
}

/// One cell of the estimation dataset after plan resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedCell {
    /// Usable observed value.
    Observed(f64),
    /// Must be imputed.
    Target { method: MethodSpec, cause: Option<IceCause>, dead: bool },
}

/// One patient of the estimation dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPatient {
    pub id: u32,
    pub arm: Arm,
    pub baseline: f64,
    /// Post-resolution cells, visits `1..=T`.
    pub cells: Vec<ResolvedCell>,
    /// Raw observed values before any strategy discard, visits `1..=T`.
    pub raw: Vec<Option<f64>>,
    /// First visit of each event cause on the assigned arm.
    pub cause_first: Vec<(IceCause, usize)>,
    /// Whether the patient started rescue outside the declared regimen.
    pub had_rescue: bool,
}

/// Estimation input: observed cells plus fully specified imputation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedDataset {
    pub final_visit: usize,
    pub death_delta: f64,
    pub patients: Vec<ResolvedPatient>,
}

/// Build the estimation dataset for a replicate under a validated plan.
pub fn build_resolved(
    patients: &[PatientRecord],
    plan: &NormalizedPlan,
    final_visit: usize,
) -> ResolvedDataset {
    let rows = patients
        .iter()
        .map(|p| {
            let handling = crate::plan::resolve_patient(p, plan, final_visit);
            let cells = (1..=final_visit)
                .map(|v| match handling.decision(v) {
                    VisitDecision::UseObserved => match p.observed[v] {
                        Obs::Value(y) => ResolvedCell::Observed(y),
                        Obs::Missing(_) => unreachable!("resolution marked a missing cell usable"),
                    },
                    VisitDecision::DiscardAndImpute { method, cause } => {
                        ResolvedCell::Target { method: method.clone(), cause: cause.to_owned(), dead: false }
                    }
                    VisitDecision::DeadCell { method, cause } => {
                        ResolvedCell::Target { method: method.clone(), cause: cause.to_owned(), dead: true }
                    }
                })
                .collect();
            let mut cause_first: Vec<(IceCause, usize)> = Vec::new();
            for e in &p.ice_history[p.assigned_arm.index()] {
                if plan.regimen_kinds.contains(&e.kind) {
                    continue;
                }
                if !cause_first.iter().any(|(c, _)| *c == e.cause) {
                    cause_first.push((e.cause, e.visit));
                }
            }
            let had_rescue = p.ice_history[p.assigned_arm.index()]
                .iter()
                .any(|e| e.kind == IceKind::RescueStart && !plan.regimen_kinds.contains(&e.kind));
            ResolvedPatient {
                id: p.id,
                arm: p.assigned_arm,
                baseline: p.baseline_covariate,
                cells,
                raw: (1..=final_visit).map(|v| p.observed[v].value()).collect(),
                cause_first,
                had_rescue,
            }
        })
        .collect();
    ResolvedDataset { final_visit, death_delta: plan.death_delta, patients: rows }
}

/// Cell provenance, identical across copies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    Observed,
    Imputed { method: MethodKind, dead: bool },
}

/// `m` completed copies of one dataset plus per-cell provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedSet {
    pub final_visit: usize,
    pub m: usize,
    pub ids: Vec<u32>,
    pub arms: Vec<Arm>,
    pub baselines: Vec<f64>,
    /// `[patient][visit-1]`.
    pub provenance: Vec<Vec<Provenance>>,
    /// `[copy][patient][visit-1]`.
    pub copies: Vec<Vec<Vec<f64>>>,
}

impl ImputedSet {
    pub fn n_patients(&self) -> usize {
        self.ids.len()
    }

    /// Digest over every observed-provenance cell in every copy; unchanged
    /// by imputation and delta adjustment.
    pub fn observed_digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for copy in &self.copies {
            for (pi, row) in copy.iter().enumerate() {
                for (ci, v) in row.iter().enumerate() {
                    if self.provenance[pi][ci] == Provenance::Observed {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum ModelKey {
    Mar { arm: Arm, visit: usize },
    BaselineAnchor { arm: Arm, visit: usize },
    Retrieved { arm: Arm, cause: IceCause, visit: usize },
    Pattern { arm: Arm, donor: IceCause, visit: usize },
}

impl ModelKey {
    fn tag(self) -> u64 {
        match self {
            ModelKey::Mar { .. } => 0,
            ModelKey::BaselineAnchor { .. } => 1,
            ModelKey::Retrieved { .. } => 2,
            ModelKey::Pattern { .. } => 3,
        }
    }

    fn visit(self) -> usize {
        match self {
            ModelKey::Mar { visit, .. }
            | ModelKey::BaselineAnchor { visit, .. }
            | ModelKey::Retrieved { visit, .. }
            | ModelKey::Pattern { visit, .. } => visit,
        }
    }
}

struct FittedModel {
    model: LinearModel,
    draws: Vec<PosteriorDraw>,
}

struct Engine<'a> {
    data: &'a ResolvedDataset,
    m: usize,
    seed: u64,
    models: HashMap<ModelKey, FittedModel>,
    implied_means: HashMap<(usize, usize), f64>,
}

/// Sequential per-arm, per-visit regression of a visit on baseline and all
/// earlier visits, fit on cases whose resolved history through the visit is
/// complete. Exposed for inspection and tests; the engine fits the same
/// models internally.
pub fn fit_visit_model(
    data: &ResolvedDataset,
    arm: Arm,
    visit: usize,
) -> Result<LinearModel, ImputeError> {
    let (xs, ys) = mar_rows(data, arm, visit);
    fit_with_context(&xs, &ys, format!("arm {arm}, visit {visit}"))
}

fn fit_with_context(xs: &[Vec<f64>], ys: &[f64], context: String) -> Result<LinearModel, ImputeError> {
    regress::fit(xs, ys).map_err(|e| match e {
        FitError::TooFewCases { needed, got } => ImputeError::Insufficient { context, needed, got },
        FitError::RankDeficient => ImputeError::RankDeficient { context },
    })
}

fn observed_at(p: &ResolvedPatient, visit: usize) -> Option<f64> {
    match &p.cells[visit - 1] {
        ResolvedCell::Observed(y) => Some(*y),
        ResolvedCell::Target { .. } => None,
    }
}

fn complete_through(p: &ResolvedPatient, visit: usize) -> bool {
    (1..=visit).all(|w| observed_at(p, w).is_some())
}

fn history_row(p: &ResolvedPatient, visit: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(visit + 1);
    x.push(1.0);
    x.push(p.baseline);
    for w in 1..visit {
        x.push(observed_at(p, w).unwrap());
    }
    x
}

fn mar_rows(data: &ResolvedDataset, arm: Arm, visit: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in data.patients.iter().filter(|p| p.arm == arm) {
        if complete_through(p, visit) {
            xs.push(history_row(p, visit));
            ys.push(observed_at(p, visit).unwrap());
        }
    }
    (xs, ys)
}

impl<'a> Engine<'a> {
    fn new(data: &'a ResolvedDataset, m: usize, seed: u64) -> Self {
        Self { data, m, seed, models: HashMap::new(), implied_means: HashMap::new() }
    }

    fn fitted(&mut self, key: ModelKey) -> Result<&FittedModel, ImputeError> {
        if !self.models.contains_key(&key) {
            let (xs, ys, context) = self.fit_rows(key)?;
            let model = fit_with_context(&xs, &ys, context)?;
            let mut stream = derive_rng_digest(
                "posterior",
                &[self.seed, key.tag(), key.visit() as u64],
                &model.data_digest,
            );
            let draws = (0..self.m).map(|_| model.draw_posterior(&mut stream)).collect();
            self.models.insert(key, FittedModel { model, draws });
        }
        Ok(&self.models[&key])
    }

    fn fit_rows(&self, key: ModelKey) -> Result<(Vec<Vec<f64>>, Vec<f64>, String), ImputeError> {
        match key {
            ModelKey::Mar { arm, visit } => {
                let (xs, ys) = mar_rows(self.data, arm, visit);
                Ok((xs, ys, format!("arm {arm}, visit {visit}")))
            }
            ModelKey::BaselineAnchor { arm, visit } => {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for p in self.data.patients.iter().filter(|p| p.arm == arm) {
                    if let Some(y) = observed_at(p, visit) {
                        xs.push(vec![1.0, p.baseline]);
                        ys.push(y);
                    }
                }
                Ok((xs, ys, format!("arm {arm}, visit {visit} (baseline anchor)")))
            }
            ModelKey::Retrieved { arm, cause, visit } => {
                // Donors must be observed strictly after their event, so the
                // modeled visit reflects the off-treatment distribution.
                let donors: Vec<&ResolvedPatient> = self
                    .data
                    .patients
                    .iter()
                    .filter(|p| {
                        p.arm == arm
                            && !p.had_rescue
                            && p.cause_first.iter().any(|(c, first)| *c == cause && *first < visit)
                    })
                    .collect();
                if donors.is_empty() {
                    return Err(ImputeError::NoDonors(cause));
                }
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for p in donors {
                    if complete_through(p, visit) {
                        xs.push(history_row(p, visit));
                        ys.push(observed_at(p, visit).unwrap());
                    }
                }
                if xs.is_empty() {
                    return Err(ImputeError::NoDonors(cause));
                }
                Ok((xs, ys, format!("arm {arm}, visit {visit} (retrieved dropouts, {cause})")))
            }
            ModelKey::Pattern { arm, donor, visit } => {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                let mut any_donor = false;
                for p in self.data.patients.iter().filter(|p| p.arm == arm) {
                    if !p.cause_first.iter().any(|(c, _)| *c == donor) {
                        continue;
                    }
                    any_donor = true;
                    // Donor pattern uses raw observed values, discarded or not.
                    if p.raw[..visit].iter().all(Option::is_some) {
                        let mut x = Vec::with_capacity(visit + 1);
                        x.push(1.0);
                        x.push(p.baseline);
                        for w in 1..visit {
                            x.push(p.raw[w - 1].unwrap());
                        }
                        xs.push(x);
                        ys.push(p.raw[visit - 1].unwrap());
                    }
                }
                if !any_donor || xs.is_empty() {
                    return Err(ImputeError::NoPatternDonors(donor));
                }
                Ok((xs, ys, format!("arm {arm}, visit {visit} (donor pattern, {donor})")))
            }
        }
    }

    /// MAR-implied marginal mean of an arm at a visit, from the fitted
    /// sequential models' point estimates.
    fn implied_mean(&mut self, arm: Arm, visit: usize) -> Result<f64, ImputeError> {
        for w in 0..=visit {
            if self.implied_means.contains_key(&(arm.index(), w)) {
                continue;
            }
            let mean = if w == 0 {
                let (sum, n) = self
                    .data
                    .patients
                    .iter()
                    .filter(|p| p.arm == arm)
                    .fold((0.0, 0usize), |(s, n), p| (s + p.baseline, n + 1));
                sum / n.max(1) as f64
            } else {
                let coef = self.fitted(ModelKey::Mar { arm, visit: w })?.model.coef.clone();
                let mut x = Vec::with_capacity(w + 1);
                x.push(1.0);
                for u in 0..w {
                    x.push(self.implied_means[&(arm.index(), u)]);
                }
                coef.iter().zip(&x).map(|(c, v)| c * v).sum()
            };
            self.implied_means.insert((arm.index(), w), mean);
        }
        Ok(self.implied_means[&(arm.index(), visit)])
    }

    #[allow(clippy::too_many_arguments)]
    fn draw_cell(
        &mut self,
        patient: &ResolvedPatient,
        visit: usize,
        history: &[f64],
        ref_scale: &[bool],
        method: &MethodSpec,
        cause: Option<IceCause>,
        copy: usize,
        eps: f64,
    ) -> Result<f64, ImputeError> {
        let arm = patient.arm;
        let value = match method.kind {
            MethodKind::Mar => {
                let fm = self.fitted(ModelKey::Mar { arm, visit })?;
                let d = &fm.draws[copy];
                predict_on(d, history, visit) + d.sigma * eps
            }
            MethodKind::ReturnToBaseline => {
                let fm = self.fitted(ModelKey::BaselineAnchor { arm, visit })?;
                patient.baseline + fm.draws[copy].sigma * eps
            }
            MethodKind::RetrievedDropout => {
                let cause = cause.ok_or(ImputeError::RetrievedWithoutCause)?;
                let fm = self.fitted(ModelKey::Retrieved { arm, cause, visit })?;
                let d = &fm.draws[copy];
                predict_on(d, history, visit) + d.sigma * eps
            }
            MethodKind::SpecialPattern => {
                let donor = method.donor.expect("parser guarantees a donor cause");
                let fm = self.fitted(ModelKey::Pattern { arm, donor, visit })?;
                let d = &fm.draws[copy];
                predict_on(d, history, visit) + d.sigma * eps
            }
            MethodKind::CopyReference => {
                let fm = self.fitted(ModelKey::Mar { arm: method.reference, visit })?;
                let d = &fm.draws[copy];
                predict_on(d, history, visit) + d.sigma * eps
            }
            MethodKind::JumpToReference => {
                let reference = method.reference;
                if arm == reference {
                    let fm = self.fitted(ModelKey::Mar { arm, visit })?;
                    let d = &fm.draws[copy];
                    predict_on(d, history, visit) + d.sigma * eps
                } else {
                    // Map own-arm-scale history onto the reference profile;
                    // baseline precedes treatment and reference-imputed
                    // entries are already on the reference scale.
                    let mut x = Vec::with_capacity(visit + 1);
                    x.push(1.0);
                    x.push(history[0]);
                    for w in 1..visit {
                        let y = history[w];
                        let mapped = if ref_scale[w] {
                            y
                        } else {
                            y - self.implied_mean(arm, w)? + self.implied_mean(reference, w)?
                        };
                        x.push(mapped);
                    }
                    let fm = self.fitted(ModelKey::Mar { arm: reference, visit })?;
                    let d = &fm.draws[copy];
                    d.predict(&x) + d.sigma * eps
                }
            }
        };
        Ok(value)
    }
}

fn predict_on(d: &PosteriorDraw, history: &[f64], visit: usize) -> f64 {
    let mut acc = d.coef[0];
    for (c, y) in d.coef[1..=visit].iter().zip(&history[..visit]) {
        acc += c * y;
    }
    acc
}

/// Produce `m` completed copies of the dataset.
///
/// Observed cells are identical across copies; every target cell is filled
/// in every copy. Per-method delta shifts and the death sensitivity shift
/// are added after the draw, to imputed cells only.
pub fn impute(data: &ResolvedDataset, m: usize, seed: u64) -> Result<ImputedSet, ImputeError> {
    if m < 2 {
        return Err(ImputeError::TooFewImputations(m));
    }
    let t = data.final_visit;
    let mut engine = Engine::new(data, m, seed);

    let provenance: Vec<Vec<Provenance>> = data
        .patients
        .iter()
        .map(|p| {
            p.cells
                .iter()
                .map(|c| match c {
                    ResolvedCell::Observed(_) => Provenance::Observed,
                    ResolvedCell::Target { method, dead, .. } => {
                        Provenance::Imputed { method: method.kind, dead: *dead }
                    }
                })
                .collect()
        })
        .collect();

    let mut copies = Vec::with_capacity(m);
    for copy in 0..m {
        let mut rows = Vec::with_capacity(data.patients.len());
        for p in &data.patients {
            let mut cell_rng = derive_rng("cell", &[seed, copy as u64, p.id as u64]);
            let mut history: Vec<f64> = Vec::with_capacity(t + 1);
            history.push(p.baseline);
            let mut ref_scale = vec![false; t + 1];
            let mut row = Vec::with_capacity(t);
            for v in 1..=t {
                let value = match &p.cells[v - 1] {
                    ResolvedCell::Observed(y) => *y,
                    ResolvedCell::Target { method, cause, dead } => {
                        let eps: f64 = cell_rng.sample(StandardNormal);
                        let draw =
                            engine.draw_cell(p, v, &history, &ref_scale, method, *cause, copy, eps)?;
                        let mut value = grid(draw);
                        if let Some(d) = method.delta {
                            value += grid(d);
                        }
                        if *dead {
                            value += grid(data.death_delta);
                        }
                        ref_scale[v] = matches!(
                            method.kind,
                            MethodKind::JumpToReference | MethodKind::CopyReference
                        );
                        value
                    }
                };
                history.push(value);
                row.push(value);
            }
            rows.push(row);
        }
        copies.push(rows);
    }

    Ok(ImputedSet {
        final_visit: t,
        m,
        ids: data.patients.iter().map(|p| p.id).collect(),
        arms: data.patients.iter().map(|p| p.arm).collect(),
        baselines: data.patients.iter().map(|p| p.baseline).collect(),
        provenance,
        copies,
    })
}

/// Shift targeted cells by `delta` in every copy. Targets must be imputed
/// cells; shifting an observed cell is an error.
pub fn apply_delta(
    set: &mut ImputedSet,
    delta: f64,
    targets: &[(usize, usize)],
) -> Result<(), ImputeError> {
    for &(pi, visit) in targets {
        if set.provenance[pi][visit - 1] == Provenance::Observed {
            return Err(ImputeError::DeltaOnObserved { patient: pi, visit });
        }
    }
    let d = grid(delta);
    for copy in &mut set.copies {
        for &(pi, visit) in targets {
            copy[pi][visit - 1] += d;
        }
    }
    Ok(())
}

/// Long-format export with provenance:
/// `replicate,copy,patient,visit,value,provenance,method`.
pub fn write_imputed_csv<W: Write>(w: &mut W, replicate: u64, set: &ImputedSet) -> io::Result<()> {
    writeln!(w, "replicate,copy,patient,visit,value,provenance,method")?;
    for (ci, copy) in set.copies.iter().enumerate() {
        for (pi, row) in copy.iter().enumerate() {
            writeln!(w, "{replicate},{ci},{},0,{},observed,", set.ids[pi], set.baselines[pi])?;
            for (vi, value) in row.iter().enumerate() {
                let (prov, method) = match set.provenance[pi][vi] {
                    Provenance::Observed => ("observed", String::new()),
                    Provenance::Imputed { method, .. } => ("imputed", method.to_string()),
                };
                writeln!(w, "{replicate},{ci},{},{},{value},{prov},{method}", set.ids[pi], vi + 1)?;
            }
        }
    }
    Ok(())
}
