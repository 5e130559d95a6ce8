//! State-space models, noise parameterization and trajectory synthesis.
//!
//! A model is the pair `x_t = f(x_{t-1}) + w_t`, `y_t = h(x_t) + v_t` with Gaussian
//! `w_t ~ N(0, Q)` and `v_t ~ N(0, R)`. Models are immutable once built and can be
//! shared across threads.

mod linear;
pub mod lorenz;
mod map;
mod simulate;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use linear::{
    canonical_f, canonical_f_with_root, dead_reckoning, exchange_h, linear_model, rotate_matrix, rotation_xy, toy_model,
    wiener_velocity_model,
    ToyParams,
};
pub use lorenz::{lorenz_f, lorenz_model};
pub use map::{fd_step, Map};
pub(crate) use simulate::sqrt_psd;
pub use simulate::{
    decimate, generate_dataset, simulate, simulate_decimated, simulate_with, trajectory_rng, InitialState,
};

#[derive(Clone, Debug)]
pub struct SSModel {
    m: usize,
    n: usize,
    evolution: Map,
    observation: Map,
}

impl SSModel {
    /// Builds a model on R^m; the observation dimension is inferred from `observation`.
    pub fn new(m: usize, evolution: Map, observation: Map) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        match evolution.output_dim(m) {
            Some(out) if out == m => {}
            _ => {
                return Err(Error::shape(format!(
                    "evolution map {} does not act on R^{m}",
                    evolution.describe()
                )))
            }
        }
        let n = observation.output_dim(m).ok_or_else(|| {
            Error::shape(format!("observation map {} does not accept R^{m}", observation.describe()))
        })?;
        if n == 0 {
            return Err(Error::shape("observation dimension must be positive"));
        }
        Ok(Self { m, n, evolution, observation })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn evolution(&self) -> &Map {
        &self.evolution
    }

    pub fn observation(&self) -> &Map {
        &self.observation
    }

    pub fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        self.evolution.eval(x)
    }

    pub fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        self.observation.eval(x)
    }

    pub fn f_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.evolution.jacobian(x)
    }

    pub fn h_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.observation.jacobian(x)
    }

    /// `(F, H)` when both maps are linear.
    pub fn linear_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match (&self.evolution, &self.observation) {
            (Map::Linear(f), Map::Linear(h)) => Some((f, h)),
            _ => None,
        }
    }

    /// Same dynamics with a different observation map.
    pub fn with_observation(&self, observation: Map) -> Result<Self> {
        Self::new(self.m, self.evolution.clone(), observation)
    }

    pub fn with_evolution(&self, evolution: Map) -> Result<Self> {
        Self::new(self.m, evolution, self.observation.clone())
    }

    /// Stable hash of the model definition. Two models share a fingerprint exactly when
    /// they define the same `f` and `h`.
    pub fn fingerprint(&self) -> String {
        let text = format!("m={};n={};f={};h={}", self.m, self.n, self.evolution.describe(), self.observation.describe());
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Isotropic noise levels: `Q = q2 I_m`, `R = r2 I_n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub q2: f64,
    pub r2: f64,
}

impl NoiseSpec {
    pub fn new(q2: f64, r2: f64) -> Result<Self> {
        if !(q2 >= 0.0 && r2 >= 0.0) || !q2.is_finite() || !r2.is_finite() {
            return Err(Error::invalid(format!("noise variances must be finite and >= 0 (q2={q2}, r2={r2})")));
        }
        Ok(Self { q2, r2 })
    }

    /// From the inverse observation variance `1/r2` and the ratio `nu = q2/r2`, both in dB.
    pub fn from_db(inv_r2_db: f64, nu_db: f64) -> Self {
        let r2 = 10f64.powf(-inv_r2_db / 10.0);
        let q2 = r2 * 10f64.powf(nu_db / 10.0);
        Self { q2, r2 }
    }

    /// `q2 / r2`, or `None` when `r2 == 0`.
    pub fn nu(&self) -> Option<f64> {
        (self.r2 > 0.0).then(|| self.q2 / self.r2)
    }

    pub fn nu_db(&self) -> Option<f64> {
        self.nu().map(|nu| 10.0 * nu.log10())
    }

    pub fn inv_r2_db(&self) -> f64 {
        -10.0 * self.r2.log10()
    }

    pub fn covariances(&self, m: usize, n: usize) -> Covariances {
        Covariances {
            q: DMatrix::identity(m, m) * self.q2,
            r: DMatrix::identity(n, n) * self.r2,
        }
    }
}

/// Full process and observation noise covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariances {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl Covariances {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if !q.is_square() || !r.is_square() {
            return Err(Error::shape("noise covariances must be square"));
        }
        Ok(Self { q, r })
    }

    pub fn check(&self, model: &SSModel) -> Result<()> {
        if self.q.nrows() != model.m() || self.r.nrows() != model.n() {
            return Err(Error::shape(format!(
                "covariances {}x{} / {}x{} do not match model m={} n={}",
                self.q.nrows(),
                self.q.ncols(),
                self.r.nrows(),
                self.r.ncols(),
                model.m(),
                model.n()
            )));
        }
        Ok(())
    }
}

/// One realization: initial state, states `x_1..x_T` and observations `y_1..y_T` as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x0: DVector<f64>,
    pub states: DMatrix<f64>,
    pub observations: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(x0: DVector<f64>, states: DMatrix<f64>, observations: DMatrix<f64>) -> Result<Self> {
        if states.ncols() == 0 {
            return Err(Error::invalid("trajectory length must be >= 1"));
        }
        if states.ncols() != observations.ncols() {
            return Err(Error::shape(format!(
                "states have {} steps but observations have {}",
                states.ncols(),
                observations.ncols()
            )));
        }
        if x0.len() != states.nrows() {
            return Err(Error::shape("initial state dimension differs from state dimension"));
        }
        if !(x0.iter().chain(states.iter()).chain(observations.iter()).all(|v| v.is_finite())) {
            return Err(Error::invalid("trajectory contains non-finite entries"));
        }
        Ok(Self { x0, states, observations })
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn m(&self) -> usize {
        self.states.nrows()
    }

    pub fn n(&self) -> usize {
        self.observations.nrows()
    }

    /// Steps `[start, start + len)` as a new trajectory whose initial state is the true
    /// state just before `start`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Trajectory> {
        if len == 0 || start + len > self.len() {
            return Err(Error::invalid(format!(
                "segment [{start}, {}) outside trajectory of length {}",
                start + len,
                self.len()
            )));
        }
        let x0 = if start == 0 { self.x0.clone() } else { self.states.column(start - 1).into_owned() };
        Ok(Trajectory {
            x0,
            states: self.states.columns(start, len).into_owned(),
            observations: self.observations.columns(start, len).into_owned(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub split: Split,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, split: Split) -> Result<Self> {
        let first = trajectories.first().ok_or_else(|| Error::invalid("dataset must not be empty"))?;
        let (m, n) = (first.m(), first.n());
        if trajectories.iter().any(|t| t.m() != m || t.n() != n) {
            return Err(Error::shape("all trajectories in a dataset must share m and n"));
        }
        Ok(Self { trajectories, split })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn m(&self) -> usize {
        self.trajectories[0].m()
    }

    pub fn n(&self) -> usize {
        self.trajectories[0].n()
    }

    /// Copies with every trajectory cut to its first `len` steps.
    pub fn truncated(&self, len: usize) -> Result<Dataset> {
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| t.segment(0, len.min(t.len())))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(trajectories, self.split)
    }
}

/// `(r, polar, azimuth)` in the physics convention: polar angle from +z in `[0, pi]`,
/// azimuth from +x in `(-pi, pi]`.
pub fn spherical_h(x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != 3 {
        return Err(Error::shape("spherical coordinates need a 3-vector"));
    }
    if x.iter().all(|v| *v == 0.0) {
        return Err(Error::UndefinedAngle);
    }
    let (r, theta, phi) = map::spherical_parts(x);
    Ok(DVector::from_vec(vec![r, theta, phi]))
}

/// Inverse of [`spherical_h`].
pub fn spherical_to_cartesian(s: &DVector<f64>) -> DVector<f64> {
    let (r, theta, phi) = (s[0], s[1], s[2]);
    DVector::from_vec(vec![
        r * theta.sin() * phi.cos(),
        r * theta.sin() * phi.sin(),
        r * theta.cos(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn spherical_poles_and_axes() {
        let north = spherical_h(&DVector::from_vec(vec![0.0, 0.0, 1.0])).unwrap();
        assert_eq!(north.as_slice(), &[1.0, 0.0, 0.0]);
        let east = spherical_h(&DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        assert!((east[0] - 1.0).abs() < 1e-15);
        assert!((east[1] - PI / 2.0).abs() < 1e-15);
        assert_eq!(east[2], 0.0);
    }

    #[test]
    fn spherical_origin_is_rejected() {
        assert!(matches!(spherical_h(&DVector::zeros(3)), Err(Error::UndefinedAngle)));
        // the model map stays total
        assert_eq!(Map::Spherical.eval(&DVector::zeros(3)), DVector::zeros(3));
    }

    #[test]
    fn spherical_jacobian_matches_finite_differences() {
        let x = DVector::from_vec(vec![1.3, -0.4, 2.2]);
        let analytic = Map::Spherical.jacobian(&x);
        let numeric = Map::Spherical.finite_difference_jacobian(&x);
        assert!((analytic - numeric).norm() < 1e-8);
    }

    proptest! {
        #[test]
        fn spherical_round_trip(x in -50.0f64..50.0, y in -50.0f64..50.0, z in -50.0f64..50.0) {
            prop_assume!((x * x + y * y + z * z).sqrt() > 1e-3);
            let p = DVector::from_vec(vec![x, y, z]);
            let s = spherical_h(&p).unwrap();
            prop_assert!(s[1] >= 0.0 && s[1] <= PI);
            prop_assert!(s[2] > -PI && s[2] <= PI);
            let back = spherical_to_cartesian(&s);
            prop_assert!((back - &p).norm() <= 1e-12 * p.norm().max(1.0));
        }
    }

    #[test]
    fn noise_spec_ratio() {
        let spec = NoiseSpec::from_db(20.0, -20.0);
        assert!((spec.r2 - 0.01).abs() < 1e-15);
        assert!((spec.q2 - 1e-4).abs() < 1e-17);
        assert!((spec.nu().unwrap() - spec.q2 / spec.r2).abs() < 1e-15);
        assert!((spec.nu_db().unwrap() + 20.0).abs() < 1e-9);
        assert_eq!(NoiseSpec::new(1.0, 0.0).unwrap().nu(), None);
        assert!(NoiseSpec::new(-1.0, 1.0).is_err());
        let cov = NoiseSpec::new(2.0, 3.0).unwrap().covariances(2, 1);
        assert_eq!(cov.q, DMatrix::identity(2, 2) * 2.0);
        assert_eq!(cov.r, DMatrix::identity(1, 1) * 3.0);
    }

    #[test]
    fn fingerprints_separate_models() {
        let a = linear_model(canonical_f(2), exchange_h(2, 2)).unwrap();
        let b = linear_model(rotate_matrix(&canonical_f(2), 10.0).unwrap(), exchange_h(2, 2)).unwrap();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn trajectory_validation() {
        let x0 = DVector::zeros(2);
        assert!(Trajectory::new(x0.clone(), DMatrix::zeros(2, 0), DMatrix::zeros(1, 0)).is_err());
        assert!(Trajectory::new(x0.clone(), DMatrix::zeros(2, 3), DMatrix::zeros(1, 2)).is_err());
        let mut bad = DMatrix::zeros(2, 3);
        bad[(0, 1)] = f64::NAN;
        assert!(Trajectory::new(x0, bad, DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn segment_starts_from_previous_true_state() {
        let states = DMatrix::from_fn(1, 6, |_, c| c as f64 + 1.0);
        let traj = Trajectory::new(DVector::zeros(1), states.clone(), states).unwrap();
        let seg = traj.segment(2, 3).unwrap();
        assert_eq!(seg.x0[0], 2.0);
        assert_eq!(seg.states.as_slice(), &[3.0, 4.0, 5.0]);
        assert!(traj.segment(4, 3).is_err());
    }
}
