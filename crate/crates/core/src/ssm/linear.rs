use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Map, SSModel};
use crate::error::{Error, Result};

pub fn linear_model(f: DMatrix<f64>, h: DMatrix<f64>) -> Result<SSModel> {
    if !f.is_square() {
        return Err(Error::shape(format!("evolution matrix must be square, got {}x{}", f.nrows(), f.ncols())));
    }
    if h.ncols() != f.nrows() {
        return Err(Error::shape(format!(
            "observation matrix has {} columns but the state has dimension {}",
            h.ncols(),
            f.nrows()
        )));
    }
    let m = f.nrows();
    SSModel::new(m, Map::Linear(f), Map::Linear(h))
}

/// Controllable canonical (companion) form of the polynomial `(z - 0.5)^m`: ones on the
/// superdiagonal and the negated polynomial coefficients in the last row.
pub fn canonical_f(m: usize) -> DMatrix<f64> {
    canonical_f_with_root(m, 0.5)
}

/// Companion form of `(z - root)^m`. `root = 1` gives a marginally stable chain of
/// integrators whose state variance grows with time.
pub fn canonical_f_with_root(m: usize, root: f64) -> DMatrix<f64> {
    assert!(m >= 1, "canonical form needs m >= 1");
    // coefficients of (z - root)^m, lowest degree first, built by repeated multiplication
    let mut coeffs = vec![1.0];
    for _ in 0..m {
        let mut next = vec![0.0; coeffs.len() + 1];
        for (k, c) in coeffs.iter().enumerate() {
            next[k + 1] += c;
            next[k] -= root * c;
        }
        coeffs = next;
    }
    let mut f = DMatrix::zeros(m, m);
    for i in 0..m - 1 {
        f[(i, i + 1)] = 1.0;
    }
    for j in 0..m {
        f[(m - 1, j)] = -coeffs[j];
    }
    f
}

/// First `n` rows of the `m x m` exchange (row-reversed identity) matrix.
pub fn exchange_h(n: usize, m: usize) -> DMatrix<f64> {
    assert!(n >= 1 && n <= m, "exchange observation needs 1 <= n <= m");
    DMatrix::from_fn(n, m, |i, j| if i + j == m - 1 { 1.0 } else { 0.0 })
}

/// `R(alpha) B` with `R` the planar rotation by `alpha` degrees.
pub fn rotate_matrix(b: &DMatrix<f64>, alpha_deg: f64) -> Result<DMatrix<f64>> {
    if b.shape() != (2, 2) {
        return Err(Error::shape(format!("rotation needs a 2x2 matrix, got {}x{}", b.nrows(), b.ncols())));
    }
    Ok(rotation_xy(2, alpha_deg) * b)
}

/// Rotation by `alpha` degrees in the plane of the first two coordinates of R^dim.
pub fn rotation_xy(dim: usize, alpha_deg: f64) -> DMatrix<f64> {
    assert!(dim >= 2, "planar rotation needs dim >= 2");
    let a = alpha_deg * PI / 180.0;
    let mut r = DMatrix::identity(dim, dim);
    r[(0, 0)] = a.cos();
    r[(0, 1)] = -a.sin();
    r[(1, 0)] = a.sin();
    r[(1, 1)] = a.cos();
    r
}

/// Parameters of the sinusoidal-evolution / quadratic-observation model on R^2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
    pub delta: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ToyParams {
    /// Data-generating parameters.
    pub const FULL: ToyParams = ToyParams { alpha: 0.9, beta: 1.1, phi: 0.1 * PI, delta: 0.01, a: 1.0, b: 1.0, c: 0.0 };
    /// Simplified parameters handed to filters under partial information.
    pub const PARTIAL: ToyParams = ToyParams { alpha: 1.0, beta: 1.0, phi: 0.0, delta: 0.0, a: 1.0, b: 1.0, c: 0.0 };
}

pub fn toy_model(p: ToyParams) -> SSModel {
    SSModel::new(
        2,
        Map::Sinusoid { alpha: p.alpha, beta: p.beta, phi: p.phi, delta: p.delta },
        Map::Quadratic { a: p.a, b: p.b, c: p.c },
    )
    .expect("component-wise maps accept R^2")
}

/// Planar constant-velocity (Wiener velocity) model with state `(p_x, v_x, p_y, v_y)`
/// observed through its velocities only. Returns the model and the process covariance.
pub fn wiener_velocity_model(dtau: f64, q2: f64) -> Result<(SSModel, DMatrix<f64>)> {
    if !(dtau > 0.0) {
        return Err(Error::invalid("sampling interval must be positive"));
    }
    let mut f = DMatrix::zeros(4, 4);
    let mut q = DMatrix::zeros(4, 4);
    let mut h = DMatrix::zeros(2, 4);
    for axis in 0..2 {
        let o = 2 * axis;
        f[(o, o)] = 1.0;
        f[(o, o + 1)] = dtau;
        f[(o + 1, o + 1)] = 1.0;
        q[(o, o)] = q2 * dtau.powi(3) / 3.0;
        q[(o, o + 1)] = q2 * dtau.powi(2) / 2.0;
        q[(o + 1, o)] = q2 * dtau.powi(2) / 2.0;
        q[(o + 1, o + 1)] = q2 * dtau;
        h[(axis, o + 1)] = 1.0;
    }
    Ok((linear_model(f, h)?, q))
}

/// Integrated-velocity position estimate: `p_t = p_0 + dtau * sum_{s<=t} v_s` per axis.
pub fn dead_reckoning(p0: &DVector<f64>, velocities: &DMatrix<f64>, dtau: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(velocities.nrows(), velocities.ncols());
    let mut pos = p0.clone();
    for t in 0..velocities.ncols() {
        pos += velocities.column(t) * dtau;
        out.set_column(t, &pos);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spectral_radius(f: &DMatrix<f64>) -> f64 {
        f.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn canonical_small_cases() {
        assert_eq!(canonical_f(1), DMatrix::from_element(1, 1, 0.5));
        assert_eq!(canonical_f(2), DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.25, 1.0]));
    }

    #[test]
    fn canonical_is_stable() {
        for m in 1..=10 {
            let rho = spectral_radius(&canonical_f(m));
            assert!(rho < 1.0, "m={m} rho={rho}");
        }
    }

    #[test]
    fn canonical_characteristic_polynomial() {
        // det(zI - F) at a few points equals (z - 0.5)^m
        for m in 1..=6 {
            let f = canonical_f(m);
            for z in [0.0, 1.5, -2.0] {
                let det = (DMatrix::identity(m, m) * z - &f).determinant();
                let expected = (z - 0.5f64).powi(m as i32);
                assert!((det - expected).abs() < 1e-9 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn exchange_observation() {
        assert_eq!(exchange_h(2, 2), DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(exchange_h(1, 3), DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]));
    }

    #[test]
    fn rotations() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rotate_matrix(&b, 0.0).unwrap(), b);
        let quarter = rotate_matrix(&DMatrix::identity(2, 2), 90.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!((quarter - expected).norm() < 1e-15);
        assert!(rotate_matrix(&DMatrix::identity(3, 3), 10.0).is_err());
        for alpha in [1.0, 10.0, 37.5, 200.0] {
            let prod = rotation_xy(2, alpha) * rotation_xy(2, -alpha);
            assert!((prod - DMatrix::identity(2, 2)).norm() < 1e-14);
        }
    }

    #[test]
    fn linear_model_shapes() {
        let model = linear_model(canonical_f(2), exchange_h(2, 2)).unwrap();
        assert_eq!((model.m(), model.n()), (2, 2));
        let x = DVector::from_vec(vec![0.3, -1.2]);
        assert_eq!(model.f_jacobian(&x), canonical_f(2));
        assert_eq!(model.h_jacobian(&x), exchange_h(2, 2));
        assert!(linear_model(DMatrix::zeros(2, 3), DMatrix::zeros(1, 2)).is_err());
        assert!(linear_model(DMatrix::zeros(2, 2), DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn toy_model_values() {
        let model = toy_model(ToyParams::FULL);
        let ones = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(model.h(&ones), ones);
        let partial = toy_model(ToyParams::PARTIAL);
        assert_eq!(partial.f_jacobian(&DVector::zeros(2)), DMatrix::identity(2, 2));
        let x = DVector::from_vec(vec![0.7, -0.2]);
        assert!((model.f_jacobian(&x) - model.evolution().finite_difference_jacobian(&x)).norm() < 1e-8);
        assert!((model.h_jacobian(&x) - model.observation().finite_difference_jacobian(&x)).norm() < 1e-8);
    }

    #[test]
    fn wiener_unit_interval() {
        let (model, q) = wiener_velocity_model(1.0, 2.0).unwrap();
        let (f, h) = model.linear_parts().unwrap();
        assert_eq!(f.view((0, 0), (2, 2)), DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        let expected = DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.5, 0.5, 1.0]) * 2.0;
        assert!((q.view((2, 2), (2, 2)) - expected).norm() < 1e-15);
        assert_eq!(h.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
        assert!(wiener_velocity_model(0.0, 1.0).is_err());
    }

    #[test]
    fn wiener_small_interval_limit() {
        let (model, q) = wiener_velocity_model(1e-9, 1.0).unwrap();
        let (f, _) = model.linear_parts().unwrap();
        assert!((f - DMatrix::identity(4, 4)).norm() < 1e-8);
        assert!(q.norm() < 1e-8);
    }

    #[test]
    fn wiener_covariance_is_psd() {
        for k in -6..=6 {
            let dtau = 10f64.powf(k as f64 / 2.0);
            let (_, q) = wiener_velocity_model(dtau, 1.0).unwrap();
            let eig = q.symmetric_eigenvalues();
            let scale = q.norm();
            assert!(eig.iter().all(|e| *e >= -1e-12 * scale), "dtau={dtau} eig={eig:?}");
        }
    }

    #[test]
    fn dead_reckoning_integrates() {
        let v = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]);
        let p = dead_reckoning(&DVector::from_element(1, 10.0), &v, 0.5);
        assert_eq!(p.as_slice(), &[10.5, 11.5, 11.0]);
    }
}
