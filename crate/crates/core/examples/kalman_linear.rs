//! Kalman filtering of a 2x2 linear model: the empirical MSE against the
//! steady-state error covariance, and the EKF reducing to the KF.

use learned_kalman::filters::{filter_dataset, kf_step, steady_state_gain, GaussianBelief, GaussianFilter};
use learned_kalman::metrics::to_db;
use learned_kalman::ssm::{canonical_f_with_root, exchange_h, generate_dataset, linear_model, InitialState, NoiseSpec, Split};
use learned_kalman::trainer::evaluate_filter;
use nalgebra::DVector;

fn main() -> learned_kalman::Result<()> {
    let model = linear_model(canonical_f_with_root(2, 0.5), exchange_h(2, 2))?;
    println!("{:>8} {:>10} {:>10} {:>10}", "1/r2 dB", "KF dB", "EKF dB", "P_inf dB");
    for inv_db in [-10.0, 0.0, 10.0, 20.0] {
        let cov = NoiseSpec::from_db(inv_db, 0.0).covariances(2, 2);
        let test = generate_dataset(&model, &cov, &InitialState::default(), 200, 100, 11, Split::Test)?;

        let kf = evaluate_filter(&mut GaussianFilter::kalman(&model, &cov)?, &test)?;
        let ekf = evaluate_filter(&mut GaussianFilter::extended(&model, &cov)?, &test)?;

        // the posterior covariance after many steps from an exact start
        let mut belief = GaussianBelief::exact(DVector::zeros(2));
        for _ in 0..500 {
            belief = kf_step(&belief, &DVector::zeros(2), &model, &cov)?.posterior().expect("the KF tracks its covariance");
        }
        let analytic = belief.cov.trace() / 2.0;
        println!("{inv_db:>8.1} {:>10.3} {:>10.3} {:>10.3}", kf.mse_db, ekf.mse_db, to_db(analytic));
    }

    let cov = NoiseSpec::from_db(10.0, 0.0).covariances(2, 2);
    let gain = steady_state_gain(&model, &cov, 1e-12, 10_000)?;
    println!("steady-state gain at 10 dB:\n{gain}");

    let data = generate_dataset(&model, &cov, &InitialState::default(), 5, 50, 12, Split::Test)?;
    let kf = filter_dataset(&mut GaussianFilter::kalman(&model, &cov)?, &data)?;
    let ekf = filter_dataset(&mut GaussianFilter::extended(&model, &cov)?, &data)?;
    let worst = kf.iter().zip(&ekf).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("largest KF/EKF per-trajectory difference: {worst:e}");
    Ok(())
}
