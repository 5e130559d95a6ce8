use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Covariances, Dataset, NoiseSpec, SSModel, Split, Trajectory};
use crate::error::{Error, Result};

/// Independent stream for trajectory `index` under base seed `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// How each trajectory's initial state is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    Fixed { value: Vec<f64> },
    /// `mean + std * N(0, I)`; an empty mean means the origin.
    Gaussian {
        #[serde(default)]
        mean: Vec<f64>,
        std: f64,
    },
    /// Draw from `base`, then run the noiseless evolution for `steps` steps.
    BurnIn { base: Box<InitialState>, steps: usize },
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Gaussian { mean: Vec::new(), std: 1.0 }
    }
}

impl InitialState {
    pub fn sample<R: Rng>(&self, model: &SSModel, rng: &mut R) -> Result<DVector<f64>> {
        let m = model.m();
        match self {
            InitialState::Fixed { value } => {
                if value.len() != m {
                    return Err(Error::shape(format!("fixed initial state has length {} != {m}", value.len())));
                }
                Ok(DVector::from_column_slice(value))
            }
            InitialState::Gaussian { mean, std } => {
                let mean = match mean.len() {
                    0 => DVector::zeros(m),
                    len if len == m => DVector::from_column_slice(mean),
                    len => return Err(Error::shape(format!("initial mean has length {len} != {m}"))),
                };
                Ok(mean + standard_normal(m, rng) * *std)
            }
            InitialState::BurnIn { base, steps } => {
                let mut x = base.sample(model, rng)?;
                for _ in 0..*steps {
                    x = model.f(&x);
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SimulationDiverged { step: 0 });
                }
                Ok(x)
            }
        }
    }
}

fn standard_normal<R: Rng>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

/// Square-root factor `L` with `L L^T = cov`; falls back to a clamped eigen-decomposition
/// for singular (e.g. zero) covariances.
pub(crate) fn sqrt_psd(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if cov.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(cov.nrows(), cov.ncols());
    }
    if let Some(chol) = cov.clone().cholesky() {
        return chol.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Noise generator: `sample` returns `L z` for standard normal `z`.
struct Gaussian {
    factor: DMatrix<f64>,
    zero: bool,
}

impl Gaussian {
    fn new(cov: &DMatrix<f64>) -> Self {
        Self { factor: sqrt_psd(cov), zero: cov.iter().all(|v| *v == 0.0) }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normal(self.factor.ncols(), rng);
        if self.zero {
            // still consume the draws so a zero-noise run stays aligned with noisy ones
            return DVector::zeros(self.factor.nrows());
        }
        &self.factor * z
    }
}

/// Simulates `len` steps from `x0` with isotropic noise under a fixed seed.
pub fn simulate(model: &SSModel, noise: &NoiseSpec, x0: &DVector<f64>, len: usize, seed: u64) -> Result<Trajectory> {
    let cov = noise.covariances(model.m(), model.n());
    simulate_with(model, &cov, x0, len, &mut trajectory_rng(seed, 0))
}

pub fn simulate_with<R: Rng>(
    model: &SSModel,
    cov: &Covariances,
    x0: &DVector<f64>,
    len: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if len == 0 {
        return Err(Error::invalid("trajectory length must be >= 1"));
    }
    if x0.len() != model.m() {
        return Err(Error::shape(format!("x0 has length {} but m = {}", x0.len(), model.m())));
    }
    cov.check(model)?;
    let process = Gaussian::new(&cov.q);
    let measurement = Gaussian::new(&cov.r);
    let mut states = DMatrix::zeros(model.m(), len);
    let mut observations = DMatrix::zeros(model.n(), len);
    let mut x = x0.clone();
    for t in 0..len {
        x = model.f(&x) + process.sample(rng);
        let y = model.h(&x) + measurement.sample(rng);
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged { step: t + 1 });
        }
        states.set_column(t, &x);
        observations.set_column(t, &y);
    }
    Trajectory::new(x0.clone(), states, observations)
}

/// `count` trajectories of length `len`, trajectory `i` drawn from stream `i` of `seed`.
pub fn generate_dataset(
    model: &SSModel,
    cov: &Covariances,
    init: &InitialState,
    count: usize,
    len: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("dataset must contain at least one trajectory"));
    }
    let trajectories = (0..count)
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            let x0 = init.sample(model, &mut rng)?;
            simulate_with(model, cov, &x0, len, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories, split)
}

/// Keeps every `k`-th sample (the samples at steps `k, 2k, ...`).
pub fn decimate(traj: &Trajectory, k: usize) -> Result<Trajectory> {
    if k == 0 || traj.len() % k != 0 {
        return Err(Error::invalid(format!("decimation factor {k} must divide trajectory length {}", traj.len())));
    }
    let keep: Vec<usize> = (1..=traj.len() / k).map(|j| j * k - 1).collect();
    Ok(Trajectory {
        x0: traj.x0.clone(),
        states: traj.states.select_columns(keep.iter()),
        observations: traj.observations.select_columns(keep.iter()),
    })
}

/// Noiseless dense evolution decimated by `k`, observed with noise after decimation.
/// Streams the dense path so the full-rate trajectory is never stored.
pub fn simulate_decimated<R: Rng>(
    dense: &SSModel,
    k: usize,
    obs_cov: &DMatrix<f64>,
    x0: &DVector<f64>,
    len: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if k == 0 || len == 0 {
        return Err(Error::invalid("decimation factor and length must be positive"));
    }
    if obs_cov.nrows() != dense.n() {
        return Err(Error::shape("observation covariance does not match the model"));
    }
    let measurement = Gaussian::new(obs_cov);
    let mut states = DMatrix::zeros(dense.m(), len);
    let mut observations = DMatrix::zeros(dense.n(), len);
    let mut x = x0.clone();
    for t in 0..len {
        for _ in 0..k {
            x = dense.f(&x);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged { step: t + 1 });
        }
        let y = dense.h(&x) + measurement.sample(rng);
        states.set_column(t, &x);
        observations.set_column(t, &y);
    }
    Trajectory::new(x0.clone(), states, observations)
}
