//! The generate, train, evaluate and compare pipeline on a small config in a
//! scratch directory, the same steps `lkf` runs from the command line.

use learned_kalman::bench::config::{DesignModel, LinearObservation, SplitSpec, Splits};
use learned_kalman::bench::{self, MethodSpec, ModelSpec};
use learned_kalman::gainnet::FeatureScaling;
use learned_kalman::trainer::LearnedConfig;

fn main() -> learned_kalman::Result<()> {
    let mut cfg = bench::builtin("empty")?;
    cfg.scenario = "pipeline-demo".into();
    cfg.filter_model = ModelSpec::Linear {
        m: 2,
        n: 2,
        root: 0.5,
        evolution_rotation_deg: 0.0,
        observation: LinearObservation::Exchange,
        observation_rotation_deg: 0.0,
    };
    cfg.data_model = cfg.filter_model.clone();
    cfg.splits = Splits {
        train: SplitSpec { count: 200, len: 20 },
        validation: SplitSpec { count: 40, len: 20 },
        test: vec![SplitSpec { count: 100, len: 20 }, SplitSpec { count: 50, len: 100 }],
    };
    cfg.methods = vec![
        MethodSpec::Kf { model: DesignModel::Filter, tuned: false },
        MethodSpec::Pf { particles: 100, model: DesignModel::Filter, tuned: false },
        MethodSpec::Learned { config: LearnedConfig::C1, scaling: FeatureScaling::Raw, steps: Some(400) },
    ];
    println!("{}", cfg.to_toml());

    let dir = tempfile::tempdir()?;
    let manifest = bench::generate(&cfg, dir.path(), false)?;
    println!("{} datasets, config hash {}", manifest.datasets.len(), cfg.hash());
    for t in bench::train_all(&cfg, dir.path(), None, false)? {
        println!("trained {} (best validation {:.3} dB)", t.method, t.best_val_mse_db);
    }
    let rows: Vec<_> = bench::evaluate_all(&cfg, dir.path(), None)?.into_iter().map(|(r, _)| r).collect();
    let report = dir.path().join("report.csv");
    bench::write_report(&report, &rows, false)?;
    let merged = bench::compare(&[report.as_path()], &dir.path().join("compare.csv"))?;
    for r in &merged {
        println!("{:<20} {:<10} {:>6.1} dB  {:>8.3} dB +- {:.3}", r.scenario, r.method, r.inv_r2_db, r.mse_db, r.sigma_db);
    }
    Ok(())
}
