//! Trains the learned-gain filter on a linear model whose true evolution is
//! rotated away from the one the filter is given, and compares it with the
//! Kalman filter on the wrong model and on the right one.
//!
//! `cargo run --release --example train_learned -- [steps]`

use learned_kalman::filters::GaussianFilter;
use learned_kalman::gainnet::{FeatureScaling, Network};
use learned_kalman::ssm::{
    canonical_f_with_root, exchange_h, generate_dataset, linear_model, rotation_xy, InitialState, NoiseSpec, Split,
};
use learned_kalman::trainer::{evaluate_filter, evaluate_network, train, Bptt, LearnedConfig, TrainConfig};

fn main() -> learned_kalman::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let f = canonical_f_with_root(2, 0.5);
    let assumed = linear_model(f.clone(), exchange_h(2, 2))?;
    let truth = linear_model(rotation_xy(2, 10.0) * &f, exchange_h(2, 2))?;
    let cov = NoiseSpec::from_db(20.0, 0.0).covariances(2, 2);
    let init = InitialState::default();
    let train_set = generate_dataset(&truth, &cov, &init, 500, 20, 1, Split::Train)?;
    let validation = generate_dataset(&truth, &cov, &init, 100, 20, 2, Split::Validation)?;
    let test = generate_dataset(&truth, &cov, &init, 200, 20, 3, Split::Test)?;

    let mut net = Network::new(LearnedConfig::C2.network_spec(FeatureScaling::Raw), 2, 2, 7)?;
    let mut cfg = TrainConfig::new(steps, Bptt::Whole);
    cfg.batch_size = 8;
    cfg.val_every = 25;
    cfg.clip_norm = Some(1.0);
    let outcome = train(&mut net, &assumed, &train_set, &validation, &cfg)?;
    for row in outcome.log.iter().filter(|r| r.val_mse_db.is_some()) {
        println!("step {:>4}  train loss {:.4}  validation {:.3} dB", row.step, row.train_loss, row.val_mse_db.unwrap());
    }

    let mismatched = evaluate_filter(&mut GaussianFilter::kalman(&assumed, &cov)?, &test)?;
    let oracle = evaluate_filter(&mut GaussianFilter::kalman(&truth, &cov)?, &test)?;
    let learned = evaluate_network(&net, &assumed, &test)?;
    println!("KF on the assumed model {:>8.3} dB", mismatched.mse_db);
    println!("KF on the true model    {:>8.3} dB", oracle.mse_db);
    println!("learned gain            {:>8.3} dB", learned.mse_db);
    Ok(())
}
