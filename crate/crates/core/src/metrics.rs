//! Error metrics shared by model-based and learned filters.

use nalgebra::DMatrix;

/// Lowest value reported on the dB scale; keeps a perfect estimate finite.
pub const DB_FLOOR: f64 = -300.0;

pub fn to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        return DB_FLOOR;
    }
    (10.0 * linear.log10()).max(DB_FLOOR)
}

/// Mean over time steps and state components of the squared error.
pub fn trajectory_mse(estimates: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(estimates.shape(), truth.shape());
    (estimates - truth).norm_squared() / truth.len() as f64
}

/// Per-step squared error `||x_hat_t - x_t||^2`.
pub fn step_squared_errors(estimates: &DMatrix<f64>, truth: &DMatrix<f64>) -> Vec<f64> {
    (estimates - truth).column_iter().map(|c| c.norm_squared()).collect()
}

/// Aggregate over trajectories: `(mse_db, sigma_db)` where `mse_db` is the dB value of
/// the mean linear MSE and `sigma_db` the standard deviation of per-trajectory dB values.
pub fn aggregate_db(per_trajectory: &[f64]) -> (f64, f64) {
    if per_trajectory.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let count = per_trajectory.len() as f64;
    let mean = per_trajectory.iter().sum::<f64>() / count;
    let dbs: Vec<f64> = per_trajectory.iter().map(|v| to_db(*v)).collect();
    let db_mean = dbs.iter().sum::<f64>() / count;
    let var = dbs.iter().map(|d| (d - db_mean).powi(2)).sum::<f64>() / count;
    (to_db(mean), var.sqrt())
}
