use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ssm::{Covariances, SSModel};

/// Weighted particle cloud; particles are columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleBelief {
    pub particles: DMatrix<f64>,
    pub weights: DVector<f64>,
}

impl ParticleBelief {
    /// `count` copies of `x0` with uniform weights.
    pub fn at(x0: &DVector<f64>, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("particle filter needs at least one particle"));
        }
        let particles = DMatrix::from_fn(x0.len(), count, |i, _| x0[i]);
        Ok(Self { particles, weights: DVector::from_element(count, 1.0 / count as f64) })
    }

    pub fn len(&self) -> usize {
        self.particles.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self) -> DVector<f64> {
        &self.particles * &self.weights
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Output of one bootstrap step.
#[derive(Clone, Debug)]
pub struct ParticleStep {
    pub belief: ParticleBelief,
    pub estimate: DVector<f64>,
    /// Every likelihood was zero or non-finite; weights were reset to uniform.
    pub recovered: bool,
    pub resampled: bool,
}

/// Precomputed noise factors for the bootstrap filter.
#[derive(Clone, Debug)]
pub struct ParticleNoise {
    process_root: DMatrix<f64>,
    obs_precision_root: DMatrix<f64>,
}

impl ParticleNoise {
    pub fn new(cov: &Covariances) -> Result<Self> {
        let process_root = crate::ssm::sqrt_psd(&cov.q);
        let chol = cov
            .r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("particle weighting needs a positive definite observation covariance"))?;
        // ||L^-1 e||^2 = e^T R^-1 e
        let n = cov.r.nrows();
        let obs_precision_root = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::invalid("observation covariance is singular"))?;
        Ok(Self { process_root, obs_precision_root })
    }
}

/// Bootstrap proposal, Gaussian likelihood weighting and systematic resampling when
/// the effective sample size drops below `N/2`. The estimate is the weighted mean
/// before resampling.
pub fn pf_step<R: Rng>(
    belief: &ParticleBelief,
    y: &DVector<f64>,
    model: &SSModel,
    noise: &ParticleNoise,
    rng: &mut R,
) -> Result<ParticleStep> {
    let count = belief.len();
    if count == 0 {
        return Err(Error::invalid("empty particle cloud"));
    }
    let m = model.m();
    let mut particles = DMatrix::zeros(m, count);
    let mut log_w = DVector::zeros(count);
    for i in 0..count {
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = model.f(&belief.particles.column(i).into_owned()) + &noise.process_root * z;
        let e = y - model.h(&x);
        let white = &noise.obs_precision_root * e;
        log_w[i] = belief.weights[i].ln() - 0.5 * white.norm_squared();
        particles.set_column(i, &x);
    }
    let max = log_w.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let mut weights = log_w.map(|lw| if lw.is_finite() { (lw - max).exp() } else { 0.0 });
    let total = weights.sum();
    let recovered = !(total > 0.0 && total.is_finite());
    if recovered {
        weights.fill(1.0 / count as f64);
    } else {
        weights /= total;
    }
    let mut next = ParticleBelief { particles, weights };
    let estimate = next.mean();
    let resampled = next.effective_sample_size() < count as f64 / 2.0;
    if resampled {
        next = systematic_resample(&next, rng);
    }
    Ok(ParticleStep { belief: next, estimate, recovered, resampled })
}

/// Low-variance resampling with a single uniform offset.
pub fn systematic_resample<R: Rng>(belief: &ParticleBelief, rng: &mut R) -> ParticleBelief {
    let count = belief.len();
    let offset: f64 = rng.gen::<f64>() / count as f64;
    let mut particles = DMatrix::zeros(belief.particles.nrows(), count);
    let mut cumulative = belief.weights[0];
    let mut source = 0;
    for k in 0..count {
        let target = offset + k as f64 / count as f64;
        while cumulative < target && source + 1 < count {
            source += 1;
            cumulative += belief.weights[source];
        }
        particles.set_column(k, &belief.particles.column(source));
    }
    ParticleBelief { particles, weights: DVector::from_element(count, 1.0 / count as f64) }
}
