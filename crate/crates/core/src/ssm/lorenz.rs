//! Discrete-time Lorenz attractor: the continuous flow `dx/dtau = A(x) x` sampled with
//! `A` frozen over one interval and `exp(A dtau)` replaced by a truncated Taylor series.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{Map, SSModel};
use crate::error::Result;

/// Taylor order used to generate Lorenz data unless a run overrides it.
pub const DEFAULT_ORDER: usize = 5;
/// Sampling interval used to generate Lorenz data unless a run overrides it.
pub const DEFAULT_DTAU: f64 = 0.02;

pub fn flow_matrix(x: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        -10.0,
        10.0,
        0.0,
        28.0,
        -1.0,
        -x[0],
        0.0,
        x[0],
        -8.0 / 3.0,
    )
}

/// `I + sum_{j=1..order} (A(x) dtau)^j / j!`
pub fn taylor_transition(x: &Vector3<f64>, dtau: f64, order: usize) -> Matrix3<f64> {
    let a = flow_matrix(x) * dtau;
    let mut out = Matrix3::identity();
    let mut term = Matrix3::identity();
    for j in 1..=order {
        term = term * a / j as f64;
        out += term;
    }
    out
}

/// Dense-matrix form of [`taylor_transition`].
pub fn lorenz_f(x: &DVector<f64>, dtau: f64, order: usize) -> DMatrix<f64> {
    let v = Vector3::new(x[0], x[1], x[2]);
    let out = taylor_transition(&v, dtau, order);
    DMatrix::from_iterator(3, 3, out.iter().copied())
}

/// Lorenz evolution with the given observation map. The evolution Jacobian is taken by
/// central finite differences.
pub fn lorenz_model(dtau: f64, order: usize, observation: Map) -> Result<SSModel> {
    SSModel::new(3, Map::LorenzTaylor { dtau, order }, observation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn expm(x: &DVector<f64>, dtau: f64) -> DMatrix<f64> {
        let v = Vector3::new(x[0], x[1], x[2]);
        let a = flow_matrix(&v) * dtau;
        DMatrix::from_iterator(3, 3, a.iter().copied()).exp()
    }

    #[test]
    fn zero_interval_is_identity() {
        let x = DVector::from_vec(vec![3.0, -2.0, 7.0]);
        for order in [1, 5, 30] {
            assert_eq!(lorenz_f(&x, 0.0, order), DMatrix::identity(3, 3));
        }
    }

    #[test]
    fn high_order_matches_matrix_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-50.0..50.0));
            let diff = lorenz_f(&x, 0.02, 30) - expm(&x, 0.02);
            assert!(diff.norm() < 1e-10, "{}", diff.norm());
        }
    }

    #[test]
    fn fifth_order_step_matches_exponential_step() {
        let x = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let model = lorenz_model(0.02, 5, Map::identity(3)).unwrap();
        let expected = expm(&x, 0.02) * &x;
        // Lagrange remainder of the truncated exponential series
        let a = (flow_matrix(&Vector3::new(1.0, 1.0, 1.0)) * 0.02).norm();
        let bound = a.powi(6) / 720.0 * a.exp() * x.norm();
        let err = (model.f(&x) - &expected).norm();
        assert!(err < bound, "{err} vs {bound}");
    }

    #[test]
    fn origin_is_a_fixed_point() {
        let model = lorenz_model(0.02, 5, Map::identity(3)).unwrap();
        assert_eq!(model.f(&DVector::zeros(3)), DVector::zeros(3));
    }

    #[test]
    fn truncation_error_shrinks_with_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-50.0..50.0));
            let gaps: Vec<f64> = (1..25)
                .map(|j| (lorenz_f(&x, 0.02, j) - lorenz_f(&x, 0.02, j + 1)).norm())
                .collect();
            // monotone beyond the point where the factorial overtakes ||A dtau||^j
            for pair in gaps[4..].windows(2) {
                assert!(pair[1] <= pair[0], "{gaps:?}");
            }
        }
    }
}
