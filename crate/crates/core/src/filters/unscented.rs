use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::gaussian::{solve_innovation, symmetrize};
use super::{FilterStepRecord, GaussianBelief};
use crate::error::{Error, Result};
use crate::ssm::{Covariances, SSModel};

/// Scaled sigma-point parameters. `kappa = None` means `3 - m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: Option<f64>,
}

impl Default for UtParams {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 2.0, kappa: None }
    }
}

/// The `2m + 1` sigma points of a Gaussian together with their weights.
#[derive(Clone, Debug)]
pub struct SigmaPoints {
    /// One point per column.
    pub points: DMatrix<f64>,
    pub mean_weights: DVector<f64>,
    pub cov_weights: DVector<f64>,
}

const JITTER: f64 = 1e-9;
const JITTER_ESCALATIONS: usize = 3;

/// Cholesky factor of `cov` after symmetrizing and adding `1e-9 I`, escalating the
/// jitter tenfold up to three times.
pub fn cholesky_with_jitter(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let base = symmetrize(cov.clone());
    let dim = base.nrows();
    let mut jitter = JITTER;
    for _ in 0..=JITTER_ESCALATIONS {
        let attempt = &base + DMatrix::identity(dim, dim) * jitter;
        if let Some(chol) = attempt.cholesky() {
            return Ok(chol.l());
        }
        jitter *= 10.0;
    }
    Err(Error::FilterDiverged { step: 0, reason: "covariance is not positive definite after jitter".into() })
}

impl SigmaPoints {
    pub fn new(belief: &GaussianBelief, params: &UtParams) -> Result<Self> {
        let m = belief.mean.len();
        let mf = m as f64;
        let kappa = params.kappa.unwrap_or(3.0 - mf);
        let lambda = params.alpha * params.alpha * (mf + kappa) - mf;
        let spread = mf + lambda;
        if !(spread > 0.0) {
            return Err(Error::invalid(format!("sigma-point spread m + lambda = {spread} must be positive")));
        }
        let root = cholesky_with_jitter(&belief.cov)? * spread.sqrt();
        let mut points = DMatrix::zeros(m, 2 * m + 1);
        points.set_column(0, &belief.mean);
        for i in 0..m {
            points.set_column(1 + i, &(&belief.mean + root.column(i)));
            points.set_column(1 + m + i, &(&belief.mean - root.column(i)));
        }
        let w = 1.0 / (2.0 * spread);
        let mut mean_weights = DVector::from_element(2 * m + 1, w);
        let mut cov_weights = mean_weights.clone();
        mean_weights[0] = lambda / spread;
        cov_weights[0] = lambda / spread + 1.0 - params.alpha * params.alpha + params.beta;
        Ok(Self { points, mean_weights, cov_weights })
    }

    fn map(&self, g: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.points.column_iter().map(|c| g(&c.into_owned())).collect();
        DMatrix::from_columns(&cols)
    }
}

fn weighted_mean(points: &DMatrix<f64>, weights: &DVector<f64>) -> DVector<f64> {
    points * weights
}

fn weighted_cross(
    a: &DMatrix<f64>,
    a_mean: &DVector<f64>,
    b: &DMatrix<f64>,
    b_mean: &DVector<f64>,
    weights: &DVector<f64>,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.ncols() {
        let da = a.column(i) - a_mean;
        let db = b.column(i) - b_mean;
        out += weights[i] * &da * db.transpose();
    }
    out
}

/// Unscented Kalman filter step. Sigma points are drawn from the posterior, pushed
/// through `f`, then redrawn from the prior (noise included) and pushed through `h`.
pub fn ukf_step(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    model: &SSModel,
    cov: &Covariances,
    params: &UtParams,
) -> Result<FilterStepRecord> {
    let sigma = SigmaPoints::new(belief, params)?;
    let propagated = sigma.map(|x| model.f(x));
    let prior_mean = weighted_mean(&propagated, &sigma.mean_weights);
    let prior_cov =
        symmetrize(weighted_cross(&propagated, &prior_mean, &propagated, &prior_mean, &sigma.cov_weights) + &cov.q);
    let prior = GaussianBelief { mean: prior_mean, cov: prior_cov };

    let redrawn = SigmaPoints::new(&prior, params)?;
    let observed = redrawn.map(|x| model.h(x));
    let predicted_obs = weighted_mean(&observed, &redrawn.mean_weights);
    let s = symmetrize(
        weighted_cross(&observed, &predicted_obs, &observed, &predicted_obs, &redrawn.cov_weights) + &cov.r,
    );
    let cross = weighted_cross(&redrawn.points, &prior.mean, &observed, &predicted_obs, &redrawn.cov_weights);
    let gain = solve_innovation(&s, &cross.transpose())?.transpose();
    let innovation = y - &predicted_obs;
    let posterior_mean = &prior.mean + &gain * &innovation;
    let posterior_cov = symmetrize(&prior.cov - &gain * &s * gain.transpose());
    if posterior_mean.iter().chain(posterior_cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::FilterDiverged { step: 0, reason: "non-finite unscented update".into() });
    }
    Ok(FilterStepRecord {
        prior_mean: prior.mean,
        prior_cov: Some(prior.cov),
        predicted_obs,
        innovation,
        gain,
        posterior_mean,
        posterior_cov: Some(posterior_cov),
    })
}
