//! EKF, UKF and particle filters on the discretized Lorenz attractor, first with
//! the true noise statistics and then with covariances tuned on validation data.

use learned_kalman::filters::{tune_covariances, FilterKind, UtParams};
use learned_kalman::ssm::{generate_dataset, lorenz_model, InitialState, Map, NoiseSpec, Split};
use learned_kalman::trainer::evaluate_filter;

fn main() -> learned_kalman::Result<()> {
    let model = lorenz_model(0.02, 5, Map::identity(3))?;
    let noise = NoiseSpec::from_db(10.0, -20.0);
    let cov = noise.covariances(3, 3);
    let init = InitialState::BurnIn { base: Box::new(InitialState::Gaussian { mean: vec![1.0; 3], std: 1.0 }), steps: 100 };
    let validation = generate_dataset(&model, &cov, &init, 10, 100, 1, Split::Validation)?;
    let test = generate_dataset(&model, &cov, &init, 30, 100, 2, Split::Test)?;

    // scale q2 over four decades around the true value, keep r2
    let grid: Vec<NoiseSpec> =
        [0.01, 0.1, 1.0, 10.0, 100.0].iter().map(|s| NoiseSpec { q2: noise.q2 * s, r2: noise.r2 }).collect();

    for kind in [FilterKind::Ekf, FilterKind::Ukf { params: UtParams::default() }, FilterKind::Pf { particles: 100 }] {
        let nominal = evaluate_filter(kind.build(&model, &cov, 5)?.as_mut(), &test)?;
        let tuned = tune_covariances(kind, &model, &validation, &grid, 5)?;
        let best = evaluate_filter(kind.build(&model, &tuned.noise.covariances(3, 3), 5)?.as_mut(), &test)?;
        println!(
            "{:<4} nominal {:>8.3} dB  tuned {:>8.3} dB +- {:.3} (q2 = {:e})",
            kind.label(),
            nominal.mse_db,
            best.mse_db,
            best.sigma_db,
            tuned.noise.q2
        );
    }
    Ok(())
}
