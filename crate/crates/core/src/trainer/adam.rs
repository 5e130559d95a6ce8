use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: Vec<DMatrix<f64>>,
    pub second: Vec<DMatrix<f64>>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(params: &[DMatrix<f64>], config: AdamConfig) -> Self {
        let zeros: Vec<DMatrix<f64>> = params.iter().map(|p| DMatrix::zeros(p.nrows(), p.ncols())).collect();
        Self { config, first: zeros.clone(), second: zeros, steps: 0 }
    }

    /// Applies one update. A gradient with a non-finite entry leaves both the
    /// parameters and the moments untouched and returns `Ok(false)`.
    pub fn step(&mut self, params: &mut [DMatrix<f64>], grads: &[DMatrix<f64>], lr: f64) -> Result<bool> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::shape("adam: parameter, gradient and moment counts differ"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("adam: gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            log::warn!("skipping Adam step with a non-finite gradient");
            return Ok(false);
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            m.zip_apply(g, |mi, gi| *mi = beta1 * *mi + (1.0 - beta1) * gi);
            v.zip_apply(g, |vi, gi| *vi = beta2 * *vi + (1.0 - beta2) * gi * gi);
            p.zip_zip_apply(m, v, |pi, mi, vi| *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + eps));
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![DMatrix::from_element(2, 2, 1.5)];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step(&mut params, &[DMatrix::zeros(2, 2)], 0.1).unwrap();
        assert_eq!(params[0], DMatrix::from_element(2, 2, 1.5));
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut params = vec![DMatrix::zeros(1, 3)];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step(&mut params, &[DMatrix::from_row_slice(1, 3, &[0.3, -2.0, 40.0])], 0.01).unwrap();
        for (p, sign) in params[0].iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - sign * 0.01).abs() < 1e-9, "{p}");
        }
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut params = vec![DMatrix::zeros(1, 1)];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        assert!(!adam.step(&mut params, &[DMatrix::from_element(1, 1, f64::NAN)], 0.1).unwrap());
        assert_eq!(adam.steps, 0);
        assert_eq!(params[0][0], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = (x0 - 1)^2 + 10 (x1 + 2)^2
        let grad = |x: &DMatrix<f64>| DMatrix::from_row_slice(2, 1, &[2.0 * (x[0] - 1.0), 20.0 * (x[1] + 2.0)]);
        let mut params = vec![DMatrix::from_row_slice(2, 1, &[5.0, 5.0])];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        let mut converged = false;
        for _ in 0..5000 {
            let g = grad(&params[0]);
            if g.norm() < 1e-6 {
                converged = true;
                break;
            }
            adam.step(&mut params, &[g], 1e-2).unwrap();
        }
        assert!(converged, "{}", grad(&params[0]).norm());
    }
}
