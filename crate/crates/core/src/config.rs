//! Scenario configuration: the fully specified generative model.
//!
//! A scenario file is TOML (key/value with nested sections). Unknown keys
//! are errors. [`ScenarioFile`] mirrors the file structure; [`Scenario`]
//! is the validated, prepared form the simulator and oracle consume.
//!
//! Configured means and the rescue shift are rounded to the value grid at
//! load time (see [`crate::rng::grid`]); accessors expose the effective
//! values.

use crate::model::{Arm, IceCause, IceKind, VisitSchedule};
use crate::rng::grid;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Baseline covariate distribution. The baseline measurement is visit 0 of
/// every trajectory, so `sd` must agree with the first diagonal entry of
/// the residual covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub mean: f64,
    pub sd: f64,
}

/// Per-arm post-baseline mean profiles, one value per visit `1..=T`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanSpec {
    pub control: Vec<f64>,
    pub experimental: Vec<f64>,
    pub no_treatment: Vec<f64>,
}

/// Residual covariance over visits `0..=T`, shared across regimens.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualSpec {
    /// First-order autoregressive shorthand: `cov[i][j] = sd^2 * rho^|i-j|`.
    #[serde(default)]
    pub ar1: Option<Ar1Spec>,
    /// Explicit `(T+1) x (T+1)` matrix, row major.
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ar1Spec {
    pub sd: f64,
    pub rho: f64,
}

/// One cause-specific discrete-time hazard channel. At each post-baseline
/// visit the event fires with probability
/// `logistic(intercept + coef_latent * y + coef_arm * arm)` where `y` is the
/// current latent outcome under the arm's actual policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazardSpec {
    pub cause: IceCause,
    pub kind: IceKind,
    pub intercept: f64,
    #[serde(default)]
    pub coef_latent: f64,
    #[serde(default)]
    pub coef_arm: f64,
    /// Probability that the event also withdraws the patient from outcome
    /// collection. Death always withdraws.
    #[serde(default)]
    pub withdraw_prob: f64,
    /// When withdrawing, censor the event visit itself instead of starting
    /// after it. This is the lever that turns outcome-dependent dropout
    /// from MAR into MNAR: the triggering measurement is never collected.
    #[serde(default)]
    pub censor_event_visit: bool,
    /// For `prolonged_interruption`: visits without treatment before
    /// resumption.
    #[serde(default)]
    pub gap_visits: usize,
}

/// Visit window during which pandemic-cause hazards are active. They are
/// zero outside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PandemicSpec {
    pub start: usize,
    pub end: usize,
}

/// Raw scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub n_per_arm: usize,
    /// Visits are `0..=final_visit`; visit 0 is baseline.
    pub final_visit: usize,
    pub seed: u64,
    /// Per-visit rate in [0,1] at which post-discontinuation means decay
    /// from the on-treatment mean toward the no-treatment mean. 0 is
    /// immediate washout, 1 is no washout.
    pub washout: f64,
    /// Additive mean shift at every visit after a rescue start.
    #[serde(default)]
    pub rescue_effect: f64,
    /// Per-visit probability of a missing measurement unrelated to any
    /// event (pure MCAR).
    #[serde(default)]
    pub extra_missingness: f64,
    /// Population-level rescue rule threshold for the dynamic regimen.
    #[serde(default)]
    pub dtr_threshold: f64,
    /// Stratum threshold on the potential stratum variable.
    #[serde(default)]
    pub ps_threshold: f64,
    /// Visit whose full-adherence experimental value defines the stratum
    /// variable. Defaults to the final visit.
    #[serde(default)]
    pub ps_visit: Option<usize>,
    /// Minimum gap length for an interruption to count as an intercurrent
    /// event. Required when any interruption channel is configured; the
    /// simulator refuses channels shorter than this.
    #[serde(default)]
    pub prolonged_interruption_min: Option<usize>,
    pub baseline: BaselineSpec,
    pub means: MeanSpec,
    pub residuals: ResidualSpec,
    #[serde(default)]
    pub pandemic: Option<PandemicSpec>,
    #[serde(default)]
    pub hazards: Vec<HazardSpec>,
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }
}

/// Validated, prepared scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub n_per_arm: usize,
    pub schedule: VisitSchedule,
    pub seed: u64,
    pub washout: f64,
    pub rescue_effect: f64,
    pub extra_missingness: f64,
    pub dtr_threshold: f64,
    pub ps_threshold: f64,
    pub ps_visit: usize,
    pub pandemic: Option<(usize, usize)>,
    pub hazards: Vec<HazardSpec>,
    baseline_mean: f64,
    baseline_sd: f64,
    /// Mean profiles over visits `0..=T`, grid-rounded; index 0 is the
    /// shared baseline mean.
    mu: [Vec<f64>; 2],
    no_treatment: Vec<f64>,
    cov: Vec<Vec<f64>>,
    /// Lower Cholesky factor of the residual covariance.
    chol: Vec<Vec<f64>>,
}

impl Scenario {
    pub fn from_file(file: ScenarioFile) -> Result<Self, ConfigError> {
        if file.n_per_arm == 0 {
            return Err(invalid("n_per_arm must be positive"));
        }
        let schedule = VisitSchedule::consecutive(file.final_visit)
            .map_err(|e| invalid(format!("schedule: {e}")))?;
        let t = schedule.final_visit();

        if !(0.0..=1.0).contains(&file.washout) {
            return Err(invalid("washout must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&file.extra_missingness) {
            return Err(invalid("extra_missingness must lie in [0, 1]"));
        }
        if file.baseline.sd <= 0.0 {
            return Err(invalid("baseline.sd must be positive"));
        }

        for (name, v) in [
            ("means.control", &file.means.control),
            ("means.experimental", &file.means.experimental),
            ("means.no_treatment", &file.means.no_treatment),
        ] {
            if v.len() != t {
                return Err(invalid(format!(
                    "{name} must list {t} post-baseline visit means, got {}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("{name} contains a non-finite value")));
            }
        }

        let cov = build_cov(&file.residuals, t + 1)?;
        let chol = cholesky_lower(&cov)
            .ok_or_else(|| invalid("residual covariance is not positive definite"))?;
        if (cov[0][0] - file.baseline.sd * file.baseline.sd).abs() > 1e-9 {
            return Err(invalid(format!(
                "baseline.sd^2 = {} does not match residual covariance [0][0] = {}",
                file.baseline.sd * file.baseline.sd,
                cov[0][0]
            )));
        }

        let ps_visit = file.ps_visit.unwrap_or(t);
        if ps_visit == 0 || ps_visit > t {
            return Err(invalid(format!("ps_visit must lie in 1..={t}")));
        }

        if let Some(p) = &file.pandemic {
            if p.start == 0 || p.start > p.end || p.end > t {
                return Err(invalid("pandemic window must satisfy 1 <= start <= end <= T"));
            }
        }

        for (i, h) in file.hazards.iter().enumerate() {
            let ctx = format!("hazards[{i}] ({} / {})", h.cause, h.kind);
            if !h.intercept.is_finite() || !h.coef_latent.is_finite() || !h.coef_arm.is_finite() {
                return Err(invalid(format!("{ctx}: coefficients must be finite")));
            }
            if !(0.0..=1.0).contains(&h.withdraw_prob) {
                return Err(invalid(format!("{ctx}: withdraw_prob must lie in [0, 1]")));
            }
            if h.cause.is_pandemic() && file.pandemic.is_none() {
                return Err(invalid(format!(
                    "{ctx}: pandemic-cause hazard requires a [pandemic] window"
                )));
            }
            if h.kind == IceKind::ProlongedInterruption {
                let min = file.prolonged_interruption_min.ok_or_else(|| {
                    invalid(format!(
                        "{ctx}: interruption channels require prolonged_interruption_min \
                         (no blessed default; choose one for the disease setting)"
                    ))
                })?;
                if h.gap_visits < min.max(1) {
                    return Err(invalid(format!(
                        "{ctx}: gap_visits {} is shorter than prolonged_interruption_min {}; \
                         shorter interruptions are not intercurrent events",
                        h.gap_visits, min
                    )));
                }
            } else if h.gap_visits != 0 {
                return Err(invalid(format!(
                    "{ctx}: gap_visits only applies to prolonged_interruption"
                )));
            }
        }

        let with_baseline = |post: &[f64]| {
            let mut v = Vec::with_capacity(t + 1);
            v.push(grid(file.baseline.mean));
            v.extend(post.iter().map(|x| grid(*x)));
            v
        };

        Ok(Scenario {
            n_per_arm: file.n_per_arm,
            schedule,
            seed: file.seed,
            washout: file.washout,
            rescue_effect: grid(file.rescue_effect),
            extra_missingness: file.extra_missingness,
            dtr_threshold: file.dtr_threshold,
            ps_threshold: file.ps_threshold,
            ps_visit,
            pandemic: file.pandemic.as_ref().map(|p| (p.start, p.end)),
            hazards: file.hazards,
            baseline_mean: grid(file.baseline.mean),
            baseline_sd: file.baseline.sd,
            mu: [with_baseline(&file.means.control), with_baseline(&file.means.experimental)],
            no_treatment: with_baseline(&file.means.no_treatment),
            cov,
            chol,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_file(ScenarioFile::from_toml(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn final_visit(&self) -> usize {
        self.schedule.final_visit()
    }

    pub fn n_visits(&self) -> usize {
        self.schedule.len()
    }

    /// Effective (grid-rounded) on-treatment mean at a visit; visit 0 is
    /// the shared baseline mean.
    pub fn on_treatment_mean(&self, arm: Arm, visit: usize) -> f64 {
        self.mu[arm.index()][visit]
    }

    /// Effective no-treatment mean at a visit.
    pub fn no_treatment_mean(&self, visit: usize) -> f64 {
        self.no_treatment[visit]
    }

    pub fn baseline_mean(&self) -> f64 {
        self.baseline_mean
    }

    pub fn baseline_sd(&self) -> f64 {
        self.baseline_sd
    }

    pub fn residual_cov(&self) -> &[Vec<f64>] {
        &self.cov
    }

    /// Marginal residual SD at a visit.
    pub fn residual_sd(&self, visit: usize) -> f64 {
        self.cov[visit][visit].sqrt()
    }

    /// Lower Cholesky factor of the residual covariance.
    pub(crate) fn chol(&self) -> &[Vec<f64>] {
        &self.chol
    }

    /// Whether a hazard channel is active at a visit (pandemic causes only
    /// fire inside the pandemic window).
    pub fn channel_active(&self, h: &HazardSpec, visit: usize) -> bool {
        if h.cause.is_pandemic() {
            match self.pandemic {
                Some((lo, hi)) => visit >= lo && visit <= hi,
                None => false,
            }
        } else {
            true
        }
    }
}

fn build_cov(spec: &ResidualSpec, dim: usize) -> Result<Vec<Vec<f64>>, ConfigError> {
    match (&spec.ar1, &spec.matrix) {
        (Some(_), Some(_)) => Err(invalid("residuals: give either ar1 or matrix, not both")),
        (None, None) => Err(invalid("residuals: give ar1 or matrix")),
        (Some(ar1), None) => {
            if ar1.sd <= 0.0 || !(-1.0..1.0).contains(&ar1.rho) {
                return Err(invalid("residuals.ar1: need sd > 0 and |rho| < 1"));
            }
            let v = ar1.sd * ar1.sd;
            Ok((0..dim)
                .map(|i| (0..dim).map(|j| v * ar1.rho.powi((i as i32 - j as i32).abs())).collect())
                .collect())
        }
        (None, Some(m)) => {
            if m.len() != dim || m.iter().any(|row| row.len() != dim) {
                return Err(invalid(format!("residuals.matrix must be {dim} x {dim}")));
            }
            for i in 0..dim {
                for j in 0..dim {
                    if !m[i][j].is_finite() {
                        return Err(invalid("residuals.matrix contains a non-finite value"));
                    }
                    if (m[i][j] - m[j][i]).abs() > 1e-12 {
                        return Err(invalid("residuals.matrix must be symmetric"));
                    }
                }
            }
            Ok(m.clone())
        }
    }
}

/// Plain lower-triangular Cholesky; `None` when the matrix is not positive
/// definite.
fn cholesky_lower(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// A small well-behaved scenario used across the crate's tests.
    pub fn base_toml() -> String {
        r#"
n_per_arm = 100
final_visit = 4
seed = 7
washout = 0.5
rescue_effect = 0.8

[baseline]
mean = 0.0
sd = 1.0

[means]
control = [-0.2, -0.4, -0.6, -0.8]
experimental = [-0.5, -1.0, -1.5, -2.0]
no_treatment = [0.0, 0.0, 0.0, 0.0]

[residuals.ar1]
sd = 1.0
rho = 0.6
"#
        .to_string()
    }

    pub fn base_scenario() -> Scenario {
        Scenario::from_toml(&base_toml()).unwrap()
    }
}
