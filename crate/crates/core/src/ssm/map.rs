use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::lorenz;

type VecFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// A vector map used as either the evolution `f` or the observation `h` of a model.
///
/// Built-in variants carry analytic Jacobians where they are cheap; the Lorenz map and
/// user-supplied closures without a Jacobian fall back to central finite differences.
#[derive(Clone)]
pub enum Map {
    Linear(DMatrix<f64>),
    /// Component-wise `alpha * sin(beta * x + phi) + delta`.
    Sinusoid { alpha: f64, beta: f64, phi: f64, delta: f64 },
    /// Component-wise `a * (b * x + c)^2`.
    Quadratic { a: f64, b: f64, c: f64 },
    /// `x -> F(x) x` with `F` the order-`order` Taylor expansion of `exp(A(x) dtau)`.
    LorenzTaylor { dtau: f64, order: usize },
    /// Cartesian to spherical `(r, polar, azimuth)` on R^3.
    Spherical,
    Custom {
        name: String,
        f: Arc<VecFn>,
        jacobian: Option<Arc<JacFn>>,
    },
}

impl fmt::Debug for Map {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

/// Central-difference step used for maps without an analytic Jacobian.
pub fn fd_step(xi: f64) -> f64 {
    1e-6 * xi.abs().max(1.0)
}

impl Map {
    pub fn identity(dim: usize) -> Self {
        Map::Linear(DMatrix::identity(dim, dim))
    }

    pub fn custom<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Map::Custom { name: name.into(), f: Arc::new(f), jacobian: None }
    }

    /// Output dimension for an input of dimension `input`, or `None` if the map
    /// does not accept that input size.
    pub fn output_dim(&self, input: usize) -> Option<usize> {
        match self {
            Map::Linear(mat) => (mat.ncols() == input).then_some(mat.nrows()),
            Map::Sinusoid { .. } | Map::Quadratic { .. } => Some(input),
            Map::LorenzTaylor { .. } | Map::Spherical => (input == 3).then_some(3),
            Map::Custom { f, .. } => Some(f(&DVector::zeros(input)).len()),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Map::Linear(_))
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Map::Linear(mat) => mat * x,
            Map::Sinusoid { alpha, beta, phi, delta } => {
                x.map(|xi| alpha * (beta * xi + phi).sin() + delta)
            }
            Map::Quadratic { a, b, c } => x.map(|xi| a * (b * xi + c).powi(2)),
            Map::LorenzTaylor { dtau, order } => {
                let v = Vector3::new(x[0], x[1], x[2]);
                let out = lorenz::taylor_transition(&v, *dtau, *order) * v;
                DVector::from_column_slice(out.as_slice())
            }
            Map::Spherical => {
                let (r, theta, phi) = spherical_parts(x);
                DVector::from_vec(vec![r, theta, phi])
            }
            Map::Custom { f, .. } => f(x),
        }
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Map::Linear(mat) => mat.clone(),
            Map::Sinusoid { alpha, beta, phi, .. } => {
                DMatrix::from_diagonal(&x.map(|xi| alpha * beta * (beta * xi + phi).cos()))
            }
            Map::Quadratic { a, b, c } => {
                DMatrix::from_diagonal(&x.map(|xi| 2.0 * a * b * (b * xi + c)))
            }
            Map::Spherical => spherical_jacobian(x),
            Map::Custom { jacobian: Some(jac), .. } => jac(x),
            Map::LorenzTaylor { .. } | Map::Custom { jacobian: None, .. } => {
                self.finite_difference_jacobian(x)
            }
        }
    }

    /// Central finite-difference Jacobian with per-coordinate step `1e-6 * max(1, |x_i|)`.
    pub fn finite_difference_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let base = self.eval(x);
        let mut jac = DMatrix::zeros(base.len(), x.len());
        let mut probe = x.clone();
        for i in 0..x.len() {
            let step = fd_step(x[i]);
            probe[i] = x[i] + step;
            let plus = self.eval(&probe);
            probe[i] = x[i] - step;
            let minus = self.eval(&probe);
            probe[i] = x[i];
            jac.set_column(i, &((plus - minus) / (2.0 * step)));
        }
        jac
    }

    /// Canonical text used for model fingerprints; floats are printed round-trip exact.
    pub fn describe(&self) -> String {
        match self {
            Map::Linear(mat) => {
                let entries: Vec<String> = mat.iter().map(|v| format!("{v:?}")).collect();
                format!("linear[{}x{}]({})", mat.nrows(), mat.ncols(), entries.join(","))
            }
            Map::Sinusoid { alpha, beta, phi, delta } => {
                format!("sinusoid({alpha:?},{beta:?},{phi:?},{delta:?})")
            }
            Map::Quadratic { a, b, c } => format!("quadratic({a:?},{b:?},{c:?})"),
            Map::LorenzTaylor { dtau, order } => format!("lorenz({dtau:?},{order})"),
            Map::Spherical => "spherical".to_string(),
            Map::Custom { name, .. } => format!("custom({name})"),
        }
    }
}

/// `(r, polar, azimuth)`; total on R^3 (the origin maps to zeros).
pub(crate) fn spherical_parts(x: &DVector<f64>) -> (f64, f64, f64) {
    let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    if r == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let theta = (x[2] / r).clamp(-1.0, 1.0).acos();
    let phi = x[1].atan2(x[0]);
    (r, theta, phi)
}

fn spherical_jacobian(x: &DVector<f64>) -> DMatrix<f64> {
    let (px, py, pz) = (x[0], x[1], x[2]);
    let rho2 = px * px + py * py;
    let r2 = rho2 + pz * pz;
    if rho2 == 0.0 || r2 == 0.0 {
        // angles are singular on the z axis
        return Map::Spherical.finite_difference_jacobian(x);
    }
    let r = r2.sqrt();
    let rho = rho2.sqrt();
    let jac = Matrix3::new(
        px / r,
        py / r,
        pz / r,
        px * pz / (r2 * rho),
        py * pz / (r2 * rho),
        -rho / r2,
        -py / rho2,
        px / rho2,
        0.0,
    );
    DMatrix::from_iterator(3, 3, jac.iter().copied())
}
