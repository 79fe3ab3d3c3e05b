//! Completed-data analysis, pooling across imputations, and the
//! cross-replicate study runner that measures bias/coverage against oracle
//! truth.

use crate::config::Scenario;
use crate::impute::{build_resolved, impute, pool, ImputeError, ImputedSet, PoolError, PooledEstimate};
use crate::model::{Arm, CompositeEndpoint, IceKind, PatientRecord};
use crate::oracle::{true_for_spec, OracleError, TrueEstimand};
use crate::plan::{validate_spec, Endpoint, EstimandSpec, Finding, NormalizedPlan, Population};
use crate::rng::derive_rng;
use crate::sim::generate_replicate;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("analysis needs at least {needed} patients, got {got}")]
    TooFewPatients { needed: usize, got: usize },
    #[error("design matrix is rank deficient even without baseline")]
    Degenerate,
    #[error("an arm has no patients")]
    EmptyArm,
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("spec '{name}' failed validation: {first_error}")]
    InvalidSpec { name: String, first_error: String },
    #[error(
        "spec '{name}' declares a stratum population; stratum membership is a potential outcome \
         and has no implemented estimator (truths remain available)"
    )]
    StratumPopulation { name: String },
    #[error("oracle failed: {0}")]
    Oracle(#[from] OracleError),
    #[error(
        "failure budget exceeded: {failed} of {requested} replicates failed (budget {budget}); \
         first failure at replicate {first_replicate}: {first_message}"
    )]
    FailureBudget {
        failed: usize,
        requested: u64,
        budget: usize,
        first_replicate: u64,
        first_message: String,
    },
    #[error("pooling failed: {0}")]
    Pool(#[from] PoolError),
}

/// One completed-data analysis: point estimate and its sampling variance.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CopyEstimate {
    pub point: f64,
    pub variance: f64,
    /// Complete-data degrees of freedom for pooling.
    pub df: f64,
    pub dropped_baseline: bool,
}

/// Least squares of `y` on `(1, baseline, arm)`, returning the arm
/// coefficient and its variance. A constant baseline is dropped with a flag
/// rather than failing.
pub fn ancova(baselines: &[f64], arms: &[Arm], ys: &[f64]) -> Result<CopyEstimate, AnalysisError> {
    let n = ys.len();
    if n < 3 {
        return Err(AnalysisError::TooFewPatients { needed: 3, got: n });
    }
    if !arms.contains(&Arm::Control) || !arms.contains(&Arm::Experimental) {
        return Err(AnalysisError::EmptyArm);
    }
    match solve_ls(baselines, arms, ys, true) {
        Some((point, variance, df)) => {
            Ok(CopyEstimate { point, variance, df, dropped_baseline: false })
        }
        None => {
            let (point, variance, df) =
                solve_ls(baselines, arms, ys, false).ok_or(AnalysisError::Degenerate)?;
            Ok(CopyEstimate { point, variance, df, dropped_baseline: true })
        }
    }
}

/// Returns `(arm coefficient, its variance, residual df)`, or `None` when
/// the design is numerically rank deficient.
fn solve_ls(
    baselines: &[f64],
    arms: &[Arm],
    ys: &[f64],
    with_baseline: bool,
) -> Option<(f64, f64, f64)> {
    let n = ys.len();
    let p = if with_baseline { 3 } else { 2 };
    let arm_col = p - 1;
    let x = DMatrix::from_fn(n, p, |i, j| match j {
        0 => 1.0,
        1 if with_baseline => baselines[i],
        _ => arms[i].index() as f64,
    });
    let y = DVector::from_column_slice(ys);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let chol = Cholesky::new(xtx)?;
    let diag: Vec<f64> = (0..p).map(|j| chol.l()[(j, j)]).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    if diag.iter().any(|d| d / dmax < 1e-6) {
        return None;
    }
    let beta = chol.solve(&xty);
    let resid = &y - &x * &beta;
    let rss = resid.dot(&resid).max(0.0);
    let df = n.saturating_sub(p);
    let sigma2 = if df > 0 { rss / df as f64 } else { 0.0 };
    // [(X'X)^-1]_{arm,arm} via the Cholesky factor.
    let mut e = DVector::zeros(p);
    e[arm_col] = 1.0;
    let w = chol.l().solve_lower_triangular(&e)?;
    let inv_jj = w.dot(&w);
    Some((beta[arm_col], sigma2 * inv_jj, df as f64))
}

/// Difference in success proportions with binomial variance.
pub fn proportion_difference(arms: &[Arm], success: &[bool]) -> Result<CopyEstimate, AnalysisError> {
    let mut counts = [[0usize; 2]; 2]; // [arm][success]
    for (arm, s) in arms.iter().zip(success) {
        counts[arm.index()][usize::from(*s)] += 1;
    }
    let n0 = counts[0][0] + counts[0][1];
    let n1 = counts[1][0] + counts[1][1];
    if n0 == 0 || n1 == 0 {
        return Err(AnalysisError::EmptyArm);
    }
    let p0 = counts[0][1] as f64 / n0 as f64;
    let p1 = counts[1][1] as f64 / n1 as f64;
    let variance = p1 * (1.0 - p1) / n1 as f64 + p0 * (1.0 - p0) / n0 as f64;
    Ok(CopyEstimate { point: p1 - p0, variance, df: (n0 + n1 - 2) as f64, dropped_baseline: false })
}

/// Analyze one completed copy of an imputed set under the spec's endpoint.
pub fn analyze_copy(
    set: &ImputedSet,
    copy: usize,
    endpoint: &Endpoint,
    disqualified: Option<&[bool]>,
) -> Result<CopyEstimate, AnalysisError> {
    let finals: Vec<f64> = set.copies[copy].iter().map(|row| row[set.final_visit - 1]).collect();
    match endpoint {
        Endpoint::ContinuousChange => ancova(&set.baselines, &set.arms, &finals),
        Endpoint::Composite(ce) => {
            let success: Vec<bool> = finals
                .iter()
                .enumerate()
                .map(|(i, y)| {
                    let ok = match ce.direction {
                        crate::model::SuccessDirection::AtMost => *y <= ce.threshold,
                        crate::model::SuccessDirection::AtLeast => *y >= ce.threshold,
                    };
                    ok && !disqualified.is_some_and(|d| d[i])
                })
                .collect();
            proportion_difference(&set.arms, &success)
        }
    }
}

/// Per-patient event disqualification for a composite endpoint, from the
/// observed (assigned-arm) event history.
pub fn composite_disqualified(
    patients: &[PatientRecord],
    ce: &CompositeEndpoint,
    final_visit: usize,
) -> Vec<bool> {
    patients
        .iter()
        .map(|p| {
            p.ice_history[p.assigned_arm.index()].iter().any(|e| {
                e.visit < final_visit
                    && (e.kind == IceKind::Death
                        || ce.failure_kinds.contains(&e.kind)
                        || ce.failure_causes.contains(&e.cause))
            })
        })
        .collect()
}

/// Pooled result for one estimand in one replicate.
#[derive(Debug, Clone, Serialize)]
pub struct EstimandOutcome {
    pub estimand: String,
    pub pooled: PooledEstimate,
    /// Whether the interval covers the true estimand value.
    pub ci_covers: bool,
    pub rejects_zero: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateResult {
    pub replicate: u64,
    pub outcomes: Vec<EstimandOutcome>,
}

/// Operating characteristics of one estimand across replicates.
#[derive(Debug, Clone, Serialize)]
pub struct EstimandSummary {
    pub estimand: String,
    pub truth: f64,
    pub truth_mc_se: f64,
    pub n_replicates: usize,
    pub mean_point: f64,
    pub bias: f64,
    pub empirical_se: f64,
    pub mean_model_se: f64,
    pub coverage: f64,
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub replicates_requested: u64,
    pub replicates_used: usize,
    pub n_failed: usize,
    pub estimands: Vec<EstimandSummary>,
}

#[derive(Debug)]
pub struct StudyOutput {
    pub summary: StudySummary,
    pub replicates: Vec<ReplicateResult>,
    pub truths: Vec<TrueEstimand>,
    pub warnings: Vec<Finding>,
}

#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub replicates: u64,
    pub imputations: usize,
    pub n_oracle: usize,
    /// Fraction of replicates allowed to fail before the study aborts.
    pub failure_budget: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self { replicates: 1000, imputations: 20, n_oracle: 1_000_000, failure_budget: 0.01 }
    }
}

struct PreparedSpec {
    spec: EstimandSpec,
    plan: NormalizedPlan,
    truth: TrueEstimand,
}

fn population_keep(population: &Population, p: &PatientRecord) -> bool {
    match population {
        Population::AllRandomized => true,
        Population::BaselineSubset { min, max } => {
            min.is_none_or(|lo| p.baseline_covariate >= lo)
                && max.is_none_or(|hi| p.baseline_covariate <= hi)
        }
        Population::PrincipalStratum { .. } => true, // rejected upfront
    }
}

/// Run one replicate of the estimation pipeline for one prepared spec.
fn run_one(
    scenario: &Scenario,
    prepared: &PreparedSpec,
    patients: &[PatientRecord],
    replicate: u64,
    spec_idx: usize,
    m: usize,
) -> Result<EstimandOutcome, String> {
    let filtered: Vec<PatientRecord> = patients
        .iter()
        .filter(|p| population_keep(&prepared.spec.population, p))
        .cloned()
        .collect();
    let resolved = build_resolved(&filtered, &prepared.plan, scenario.final_visit());
    let mut seed_rng = derive_rng("impute-seed", &[scenario.seed, replicate, spec_idx as u64]);
    let impute_seed: u64 = seed_rng.gen();
    let set = impute(&resolved, m, impute_seed).map_err(|e: ImputeError| e.to_string())?;

    let disqualified = match &prepared.spec.endpoint {
        Endpoint::Composite(ce) => Some(composite_disqualified(&filtered, ce, scenario.final_visit())),
        Endpoint::ContinuousChange => None,
    };
    let estimates: Vec<(f64, f64)> = (0..m)
        .map(|c| {
            analyze_copy(&set, c, &prepared.spec.endpoint, disqualified.as_deref())
                .map(|e| (e.point, e.variance))
                .map_err(|e| e.to_string())
        })
        .collect::<Result<_, String>>()?;
    let complete_df = match &prepared.spec.endpoint {
        Endpoint::ContinuousChange => (set.n_patients().saturating_sub(3)) as f64,
        Endpoint::Composite(_) => (set.n_patients().saturating_sub(2)) as f64,
    };
    let pooled = pool(&estimates, complete_df).map_err(|e| e.to_string())?;
    let ci_covers = pooled.covers(prepared.truth.value);
    let rejects_zero = pooled.rejects_zero();
    Ok(EstimandOutcome { estimand: prepared.spec.name.clone(), pooled, ci_covers, rejects_zero })
}

/// Run the full study: per replicate, simulate, resolve, impute, analyze
/// each copy, pool, and compare to the oracle truth; then aggregate
/// operating characteristics.
///
/// Replicates run in parallel; every result is a deterministic function of
/// `(scenario seed, replicate index)`, so the worker count cannot change
/// the output. Replicate-level errors are tolerated up to the failure
/// budget and the study aborts loudly beyond it.
pub fn run_study(
    scenario: &Scenario,
    specs: &[EstimandSpec],
    opts: &StudyOptions,
) -> Result<StudyOutput, StudyError> {
    let mut prepared = Vec::new();
    let mut warnings = Vec::new();
    for spec in specs {
        let report = validate_spec(spec, Some(scenario));
        warnings.extend(report.warnings.clone());
        let plan = report.resolved_plan.ok_or_else(|| StudyError::InvalidSpec {
            name: spec.name.clone(),
            first_error: report.errors.first().map(|f| f.to_string()).unwrap_or_default(),
        })?;
        if matches!(spec.population, Population::PrincipalStratum { .. }) {
            return Err(StudyError::StratumPopulation { name: spec.name.clone() });
        }
        let truth = true_for_spec(scenario, spec, opts.n_oracle, scenario.seed)?;
        prepared.push(PreparedSpec { spec: spec.clone(), plan, truth });
    }

    let results: Vec<Result<ReplicateResult, (u64, String)>> = (0..opts.replicates)
        .into_par_iter()
        .map(|r| {
            let patients = generate_replicate(scenario, r);
            let outcomes: Result<Vec<EstimandOutcome>, String> = prepared
                .iter()
                .enumerate()
                .map(|(si, ps)| run_one(scenario, ps, &patients, r, si, opts.imputations))
                .collect();
            match outcomes {
                Ok(outcomes) => Ok(ReplicateResult { replicate: r, outcomes }),
                Err(msg) => Err((r, msg)),
            }
        })
        .collect();

    let mut replicates = Vec::new();
    let mut failures: Vec<(u64, String)> = Vec::new();
    for r in results {
        match r {
            Ok(ok) => replicates.push(ok),
            Err(f) => failures.push(f),
        }
    }
    let budget = (opts.failure_budget * opts.replicates as f64).ceil() as usize;
    if failures.len() > budget {
        let (first_replicate, first_message) = failures[0].clone();
        return Err(StudyError::FailureBudget {
            failed: failures.len(),
            requested: opts.replicates,
            budget,
            first_replicate,
            first_message,
        });
    }

    let estimands = prepared
        .iter()
        .enumerate()
        .map(|(si, ps)| {
            let points: Vec<f64> = replicates.iter().map(|r| r.outcomes[si].pooled.point).collect();
            let n = points.len();
            let mean_point = points.iter().sum::<f64>() / n.max(1) as f64;
            let empirical_se = if n > 1 {
                (points.iter().map(|p| (p - mean_point).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let mean_model_se =
                replicates.iter().map(|r| r.outcomes[si].pooled.total_var.sqrt()).sum::<f64>()
                    / n.max(1) as f64;
            let coverage = replicates.iter().filter(|r| r.outcomes[si].ci_covers).count() as f64
                / n.max(1) as f64;
            let rejection_rate =
                replicates.iter().filter(|r| r.outcomes[si].rejects_zero).count() as f64
                    / n.max(1) as f64;
            EstimandSummary {
                estimand: ps.spec.name.clone(),
                truth: ps.truth.value,
                truth_mc_se: ps.truth.mc_se,
                n_replicates: n,
                mean_point,
                bias: mean_point - ps.truth.value,
                empirical_se,
                mean_model_se,
                coverage,
                rejection_rate,
            }
        })
        .collect();

    Ok(StudyOutput {
        summary: StudySummary {
            replicates_requested: opts.replicates,
            replicates_used: replicates.len(),
            n_failed: failures.len(),
            estimands,
        },
        replicates,
        truths: prepared.into_iter().map(|p| p.truth).collect(),
        warnings,
    })
}

pub const SUMMARY_CSV_HEADER: &str = "estimand,truth,truth_mc_se,n_replicates,mean_point,bias,\
empirical_se,mean_model_se,coverage,rejection_rate";

/// Tidy one-row-per-estimand summary.
pub fn write_summary_csv<W: Write>(w: &mut W, summary: &StudySummary) -> io::Result<()> {
    writeln!(w, "{SUMMARY_CSV_HEADER}")?;
    for e in &summary.estimands {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            e.estimand,
            e.truth,
            e.truth_mc_se,
            e.n_replicates,
            e.mean_point,
            e.bias,
            e.empirical_se,
            e.mean_model_se,
            e.coverage,
            e.rejection_rate
        )?;
    }
    Ok(())
}

/// One row per replicate and estimand.
pub fn write_replicates_csv<W: Write>(w: &mut W, replicates: &[ReplicateResult]) -> io::Result<()> {
    writeln!(w, "replicate,estimand,point,se,df,ci_lower,ci_upper,ci_covers,rejects_zero")?;
    for r in replicates {
        for o in &r.outcomes {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.replicate,
                o.estimand,
                o.pooled.point,
                o.pooled.total_var.sqrt(),
                o.pooled.df,
                o.pooled.ci_lower,
                o.pooled.ci_upper,
                o.ci_covers,
                o.rejects_zero
            )?;
        }
    }
    Ok(())
}
