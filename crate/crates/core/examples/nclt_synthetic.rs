//! Synthesizes odometry and ground-truth CSVs, imports them through the same
//! resampling path a real log takes, and runs a short localization comparison.

use learned_kalman::bench::nclt::{self, NcltConfig};

fn main() -> learned_kalman::Result<()> {
    let mut cfg = NcltConfig::desk();
    cfg.training.steps = 150;
    if let Some(source) = cfg.synthetic.as_mut() {
        source.duration_s = 2000.0;
    }
    let (gt, odometry) = nclt::synthesize(&cfg.synthetic.expect("desk config has a source"))?;

    let dir = tempfile::tempdir()?;
    let (gt_path, odo_path) = (dir.path().join("ground_truth.csv"), dir.path().join("odometry.csv"));
    std::fs::write(&gt_path, gt)?;
    std::fs::write(&odo_path, odometry)?;
    let imported = nclt::import_files(&gt_path, &odo_path, &cfg.import, dir.path())?;
    println!(
        "{} steps at {} Hz, {} train / {} validation / {} test sequences, {} odometry rows dropped",
        imported.steps,
        cfg.import.rate_hz,
        imported.train.len(),
        imported.validation.len(),
        imported.test.len(),
        imported.dropped_odometry.non_finite + imported.dropped_odometry.regressions
    );

    let (train, validation, test) = nclt::load_imported(dir.path())?;
    for row in nclt::run_experiment(&cfg, (&train, &validation, &test), None)? {
        println!("{:<16} position MSE {:>8.3} dB", row.method, row.mse_db);
    }
    Ok(())
}
