//! Bayesian linear regression with the standard noninformative prior:
//! draws of `(coefficients, residual SD)` from the exact normal-inverse-
//! chi-square posterior, used to make imputations proper.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} complete cases, got {got}")]
    TooFewCases { needed: usize, got: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
}

/// Ordinary least squares fit plus what posterior draws need.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub coef: Vec<f64>,
    /// Residual variance estimate `rss / (n - p)`.
    pub resid_var: f64,
    pub n: usize,
    pub p: usize,
    /// Upper Cholesky factor of `X'X`.
    chol_upper: DMatrix<f64>,
    /// Digest of the fit data; identifies the model independently of any
    /// label, so derived randomness is symmetric under arm relabeling.
    pub data_digest: [u8; 32],
}

/// One draw from the coefficient/scale posterior.
#[derive(Debug, Clone)]
pub struct PosteriorDraw {
    pub coef: Vec<f64>,
    pub sigma: f64,
}

/// Fit `y ~ x` by least squares. Requires `n >= p + 2` so the posterior for
/// the residual variance is proper with at least two degrees of freedom.
pub fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Result<LinearModel, FitError> {
    let n = ys.len();
    let p = xs.first().map_or(0, Vec::len);
    if n < p + 2 {
        return Err(FitError::TooFewCases { needed: p + 2, got: n });
    }
    let x = DMatrix::from_fn(n, p, |i, j| xs[i][j]);
    let y = DVector::from_column_slice(ys);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let chol = Cholesky::new(xtx).ok_or(FitError::RankDeficient)?;
    // Cholesky can succeed on numerically singular matrices with a tiny
    // pivot; reject those explicitly.
    let diag: Vec<f64> = (0..p).map(|j| chol.l()[(j, j)]).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    if diag.iter().any(|d| d / dmax < 1e-6) {
        return Err(FitError::RankDeficient);
    }
    let beta = chol.solve(&xty);
    let resid = &y - &x * &beta;
    let rss = resid.dot(&resid).max(0.0);
    let resid_var = rss / (n - p) as f64;

    let mut h = Sha256::new();
    for (row, yv) in xs.iter().zip(ys) {
        for v in row {
            h.update(v.to_le_bytes());
        }
        h.update(yv.to_le_bytes());
    }
    Ok(LinearModel {
        coef: beta.iter().copied().collect(),
        resid_var,
        n,
        p,
        chol_upper: chol.l().transpose(),
        data_digest: h.finalize().into(),
    })
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coef.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Draw `(beta, sigma)`: `sigma^2 = rss / chi2(n - p)`, then
    /// `beta = beta_hat + sigma * R^-1 z` with `R` the upper Cholesky factor
    /// of `X'X`.
    pub fn draw_posterior(&self, rng: &mut impl Rng) -> PosteriorDraw {
        let df = (self.n - self.p) as f64;
        let chi2 = ChiSquared::new(df).unwrap().sample(rng);
        let sigma2 = self.resid_var * df / chi2;
        let sigma = sigma2.sqrt();
        let z = DVector::from_fn(self.p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let solved = self
            .chol_upper
            .clone()
            .solve_upper_triangular(&z)
            .expect("upper factor is nonsingular");
        let coef: Vec<f64> = self
            .coef
            .iter()
            .zip(solved.iter())
            .map(|(b, s)| b + sigma * s)
            .collect();
        PosteriorDraw { coef, sigma }
    }
}

impl PosteriorDraw {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coef.iter().zip(x).map(|(c, v)| c * v).sum()
    }
}
