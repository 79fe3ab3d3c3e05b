//! Combining rules for multiply imputed analyses: pooled point estimate,
//! within/between variance split, small-sample degrees of freedom, and the
//! t-based confidence interval.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("pooling needs at least 2 completed copies, got {0}")]
    TooFewCopies(usize),
}

/// Pooled inference across `m` completed-data analyses.
#[derive(Debug, Clone, Serialize)]
pub struct PooledEstimate {
    pub point: f64,
    pub within_var: f64,
    pub between_var: f64,
    /// `within + (1 + 1/m) * between`.
    pub total_var: f64,
    /// Small-sample adjusted degrees of freedom.
    pub df: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub m: usize,
}

impl PooledEstimate {
    pub fn covers(&self, value: f64) -> bool {
        value >= self.ci_lower && value <= self.ci_upper
    }

    /// Two-sided test of `point == 0` at level `alpha = 1 - level`.
    pub fn rejects_zero(&self) -> bool {
        !self.covers(0.0)
    }
}

/// Two-sided t quantile; falls back to the normal limit for huge df.
fn t_quantile(df: f64, prob: f64) -> f64 {
    let df = df.max(1e-3);
    if df > 1e8 {
        return statrs::distribution::Normal::new(0.0, 1.0).unwrap().inverse_cdf(prob);
    }
    StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(prob)
}

/// Pool per-copy `(point, variance)` pairs.
///
/// `complete_df` is the complete-data degrees of freedom of the analysis
/// model, used by the small-sample adjustment: with
/// `lambda = (1 + 1/m) B / T`,
///
/// ```text
/// df_old = (m - 1) / lambda^2
/// df_obs = (nu + 1) / (nu + 3) * nu * (1 - lambda)
/// df     = (1/df_old + 1/df_obs)^-1
/// ```
///
/// When the copies agree exactly (`B = 0`) the degrees of freedom reduce to
/// `df_obs` at `lambda = 0`.
pub fn pool(estimates: &[(f64, f64)], complete_df: f64) -> Result<PooledEstimate, PoolError> {
    let m = estimates.len();
    if m < 2 {
        return Err(PoolError::TooFewCopies(m));
    }
    let mf = m as f64;
    let point = estimates.iter().map(|(q, _)| q).sum::<f64>() / mf;
    let within = estimates.iter().map(|(_, u)| u).sum::<f64>() / mf;
    let between = estimates.iter().map(|(q, _)| (q - point).powi(2)).sum::<f64>() / (mf - 1.0);
    let total = within + (1.0 + 1.0 / mf) * between;

    let nu = complete_df.max(1.0);
    let lambda = if total > 0.0 { (1.0 + 1.0 / mf) * between / total } else { 0.0 };
    let df_obs = (nu + 1.0) / (nu + 3.0) * nu * (1.0 - lambda);
    let df = if lambda > 0.0 {
        let df_old = (mf - 1.0) / (lambda * lambda);
        1.0 / (1.0 / df_old + 1.0 / df_obs)
    } else {
        df_obs
    };

    let (ci_lower, ci_upper) = if total > 0.0 {
        let half = t_quantile(df, 0.975) * total.sqrt();
        (point - half, point + half)
    } else {
        (point, point)
    };

    Ok(PooledEstimate {
        point,
        within_var: within,
        between_var: between,
        total_var: total,
        df,
        ci_lower,
        ci_upper,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_copy_fixture_evaluates_the_formulas_exactly() {
        let p = pool(&[(1.0, 1.0), (3.0, 1.0)], 100.0).unwrap();
        assert_eq!(p.point, 2.0);
        assert_eq!(p.within_var, 1.0);
        assert_eq!(p.between_var, 2.0);
        assert_eq!(p.total_var, 4.0); // 1 + (1 + 1/2) * 2
    }

    #[test]
    fn identical_points_have_zero_between_variance() {
        let p = pool(&[(1.5, 0.7), (1.5, 0.9), (1.5, 0.8)], 50.0).unwrap();
        assert_eq!(p.between_var, 0.0);
        assert_eq!(p.total_var, p.within_var);
        // lambda = 0: df reduces to the observed-data part.
        let nu = 50.0;
        assert!((p.df - (nu + 1.0) / (nu + 3.0) * nu).abs() < 1e-12);
    }

    #[test]
    fn barnard_rubin_df_matches_the_hand_computed_oracle() {
        // m = 5, W = 1, B = 0.5 (so B/W = 0.5), complete-data df = 100.
        // By hand: T = 1 + 1.2*0.5 = 1.6, lambda = 0.6/1.6 = 0.375,
        // df_old = 4/0.375^2 = 28.444..., df_obs = (101/103)*100*0.625
        //        = 61.28640776699..., df = 1/(1/df_old + 1/df_obs).
        // Five points with mean 0 and sample variance exactly 0.5:
        // {a, -a, 0, b, -b} has variance (2a^2 + 2b^2) / 4, so a^2 + b^2 = 1.
        let a: f64 = 0.5;
        let b = (1.0 - a * a).sqrt();
        let pts = [a, -a, 0.0, b, -b];
        let est: Vec<(f64, f64)> = pts.iter().map(|q| (*q, 1.0)).collect();
        let p = pool(&est, 100.0).unwrap();
        assert!((p.between_var - 0.5).abs() < 1e-12);
        assert!((p.df - 19.42763027392238).abs() < 1e-8, "df = {}", p.df);
    }

    #[test]
    fn fewer_than_two_copies_is_an_error() {
        assert_eq!(pool(&[(1.0, 1.0)], 10.0).unwrap_err(), PoolError::TooFewCopies(1));
    }

    #[test]
    fn ci_is_symmetric_and_total_dominates_within() {
        let p = pool(&[(0.2, 0.5), (0.6, 0.4), (-0.1, 0.6), (0.3, 0.5)], 40.0).unwrap();
        assert!(p.total_var >= p.within_var);
        assert!(p.between_var >= 0.0);
        let mid = 0.5 * (p.ci_lower + p.ci_upper);
        assert!((mid - p.point).abs() < 1e-12);
    }
}
