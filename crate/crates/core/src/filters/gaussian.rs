use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ssm::{Covariances, SSModel};

/// Posterior (or prior) mean and covariance of a Gaussian filter.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || !cov.is_square() {
            return Err(Error::shape("belief covariance must be m x m"));
        }
        Ok(Self { mean, cov: symmetrize(cov) })
    }

    /// Point mass at `mean`.
    pub fn exact(mean: DVector<f64>) -> Self {
        let m = mean.len();
        Self { mean, cov: DMatrix::zeros(m, m) }
    }
}

/// One step of a filter, kept for inspection and logging.
#[derive(Clone, Debug)]
pub struct FilterStepRecord {
    pub prior_mean: DVector<f64>,
    pub prior_cov: Option<DMatrix<f64>>,
    pub predicted_obs: DVector<f64>,
    pub innovation: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub posterior_mean: DVector<f64>,
    pub posterior_cov: Option<DMatrix<f64>>,
}

impl FilterStepRecord {
    pub fn posterior(&self) -> Option<GaussianBelief> {
        self.posterior_cov
            .as_ref()
            .map(|cov| GaussianBelief { mean: self.posterior_mean.clone(), cov: cov.clone() })
    }
}

pub(crate) fn symmetrize(mut cov: DMatrix<f64>) -> DMatrix<f64> {
    let t = cov.transpose();
    cov += t;
    cov *= 0.5;
    cov
}

/// Solves `S X = B` for symmetric `S`: Cholesky when positive definite, pivoted LU otherwise.
pub(crate) fn solve_innovation(s: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = s.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let lu = s.clone().full_piv_lu();
    let x = lu.solve(b).ok_or(Error::IllConditionedInnovation)?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::IllConditionedInnovation)
    }
}

/// Linear prediction: returns the prior belief, the predicted observation and the
/// innovation covariance `S = H Sigma H^T + R`.
pub fn kf_predict(
    belief: &GaussianBelief,
    model: &SSModel,
    cov: &Covariances,
) -> Result<(GaussianBelief, DVector<f64>, DMatrix<f64>)> {
    let (f, h) = model.linear_parts().ok_or_else(|| Error::invalid("the Kalman filter needs a linear model"))?;
    predict_linearized(belief, f * &belief.mean, f, h, cov, |x| h * x)
}

fn predict_linearized(
    belief: &GaussianBelief,
    prior_mean: DVector<f64>,
    f_jac: &DMatrix<f64>,
    h_jac: &DMatrix<f64>,
    cov: &Covariances,
    observe: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> Result<(GaussianBelief, DVector<f64>, DMatrix<f64>)> {
    let prior_cov = symmetrize(f_jac * &belief.cov * f_jac.transpose() + &cov.q);
    let predicted_obs = observe(&prior_mean);
    let s = symmetrize(h_jac * &prior_cov * h_jac.transpose() + &cov.r);
    Ok((GaussianBelief { mean: prior_mean, cov: prior_cov }, predicted_obs, s))
}

/// Measurement update with gain `K = Sigma H^T S^-1`. Returns the posterior, the gain
/// and the innovation `y - predicted_obs`.
pub fn kf_update(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    predicted_obs: &DVector<f64>,
    s: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<(GaussianBelief, DMatrix<f64>, DVector<f64>)> {
    let cross = h * &prior.cov;
    let gain = solve_innovation(s, &cross)?.transpose();
    let innovation = y - predicted_obs;
    let mean = &prior.mean + &gain * &innovation;
    let cov = symmetrize(&prior.cov - &gain * s * gain.transpose());
    Ok((GaussianBelief { mean, cov }, gain, innovation))
}

/// Extended Kalman filter step; coincides with the Kalman filter on linear models.
pub fn ekf_step(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    model: &SSModel,
    cov: &Covariances,
) -> Result<FilterStepRecord> {
    let f_jac = model.f_jacobian(&belief.mean);
    let prior_mean = model.f(&belief.mean);
    let h_jac = model.h_jacobian(&prior_mean);
    if f_jac.iter().chain(h_jac.iter()).any(|v| !v.is_finite()) {
        return Err(Error::FilterDiverged { step: 0, reason: "non-finite Jacobian".into() });
    }
    let (prior, predicted_obs, s) = predict_linearized(belief, prior_mean, &f_jac, &h_jac, cov, |x| model.h(x))?;
    let (posterior, gain, innovation) = kf_update(&prior, y, &predicted_obs, &s, &h_jac)?;
    Ok(FilterStepRecord {
        prior_mean: prior.mean,
        prior_cov: Some(prior.cov),
        predicted_obs,
        innovation,
        gain,
        posterior_mean: posterior.mean,
        posterior_cov: Some(posterior.cov),
    })
}

/// Kalman filter step built from [`kf_predict`] and [`kf_update`].
pub fn kf_step(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    model: &SSModel,
    cov: &Covariances,
) -> Result<FilterStepRecord> {
    let (prior, predicted_obs, s) = kf_predict(belief, model, cov)?;
    let (_, h) = model.linear_parts().expect("checked by kf_predict");
    let (posterior, gain, innovation) = kf_update(&prior, y, &predicted_obs, &s, h)?;
    Ok(FilterStepRecord {
        prior_mean: prior.mean,
        prior_cov: Some(prior.cov),
        predicted_obs,
        innovation,
        gain,
        posterior_mean: posterior.mean,
        posterior_cov: Some(posterior.cov),
    })
}

/// Iterates the covariance recursion of a linear model until the gain stops changing.
pub fn steady_state_gain(model: &SSModel, cov: &Covariances, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    let (f, h) = model.linear_parts().ok_or_else(|| Error::invalid("steady-state gain needs a linear model"))?;
    let m = model.m();
    let mut sigma = DMatrix::zeros(m, m);
    let mut gain = DMatrix::zeros(m, model.n());
    for _ in 0..max_iter {
        let prior = symmetrize(f * &sigma * f.transpose() + &cov.q);
        let s = symmetrize(h * &prior * h.transpose() + &cov.r);
        let next = solve_innovation(&s, &(h * &prior))?.transpose();
        sigma = symmetrize(&prior - &next * &s * next.transpose());
        let delta = (&next - &gain).norm();
        gain = next;
        if delta < tol {
            return Ok(gain);
        }
    }
    Err(Error::FilterDiverged { step: max_iter, reason: "Riccati recursion did not converge".into() })
}
