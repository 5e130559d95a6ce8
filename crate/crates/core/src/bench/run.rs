//! Training and evaluation of every method of an experiment over a generated
//! dataset directory.

use std::path::{Path, PathBuf};

use super::config::{derive_seed, DesignModel, ExperimentConfig, MethodSpec};
use super::data::Manifest;
use super::report::ReportRow;
use crate::error::{Error, Result};
use crate::filters::tune_covariances;
use crate::gainnet::checkpoint::Checkpoint;
use crate::gainnet::Network;
use crate::ssm::{Dataset, NoiseSpec, Split};
use crate::trainer::{evaluate_filter, evaluate_network, resume, train, write_log_csv, Evaluation};

pub fn checkpoint_path(dir: &Path, method: &MethodSpec, noise_index: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("{}-{noise_index}.ckpt", method.label()))
}

fn last_path(dir: &Path, method: &MethodSpec, noise_index: usize) -> PathBuf {
    checkpoint_path(dir, method, noise_index).with_extension("last.ckpt")
}

/// Keeps the methods whose labels appear in `only` (all of them when `None`).
pub fn select_methods(cfg: &ExperimentConfig, only: Option<&[String]>) -> Result<Vec<MethodSpec>> {
    let Some(only) = only else { return Ok(cfg.methods.clone()) };
    for name in only {
        if !cfg.methods.iter().any(|m| &m.label() == name) {
            return Err(Error::Config(format!("scenario {} has no method {name:?}", cfg.scenario)));
        }
    }
    Ok(cfg.methods.iter().filter(|m| only.contains(&m.label())).copied().collect())
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub method: String,
    pub noise_index: usize,
    pub checkpoint: PathBuf,
    pub best_val_mse_db: f64,
    pub restarts: usize,
}

/// Trains every network method at every noise point. With `resume_runs`, a method
/// whose last-state checkpoint exists continues from it up to the configured step count.
pub fn train_all(cfg: &ExperimentConfig, dir: &Path, only: Option<&[String]>, resume_runs: bool) -> Result<Vec<TrainedModel>> {
    let manifest = Manifest::load(dir)?;
    manifest.check(cfg)?;
    let (_, filter_model) = cfg.models()?;
    let (m, n) = cfg.data_model.dims();
    let mut out = Vec::new();
    for method in select_methods(cfg, only)? {
        let (Some(spec), Some(mut tcfg)) = (method.network(), method.train_config(&cfg.training, cfg.segment_len())) else {
            continue;
        };
        for noise_index in 0..cfg.noise.inv_r2_db.len() {
            let train_set = manifest.load_split(dir, Split::Train, noise_index, 0)?;
            let val = manifest.load_split(dir, Split::Validation, noise_index, 0)?;
            let seed = derive_seed(cfg.seeds.train, &method.label(), noise_index as u64);
            tcfg.seed = seed;
            let mut net = Network::new(spec, m, n, seed)?;
            let last = last_path(dir, &method, noise_index);
            let outcome = if resume_runs && last.exists() {
                resume(&mut net, &filter_model, &train_set, &val, &tcfg, &Checkpoint::load(&last)?)?
            } else {
                train(&mut net, &filter_model, &train_set, &val, &tcfg)?
            };
            let mut best = outcome.best;
            if let Some(meta) = best.header.meta.as_object_mut() {
                meta.insert("scenario".into(), cfg.scenario.clone().into());
                meta.insert("method".into(), method.label().into());
                meta.insert("noise_index".into(), noise_index.into());
                meta.insert("config_hash".into(), cfg.hash().into());
            }
            let path = checkpoint_path(dir, &method, noise_index);
            best.save(&path)?;
            outcome.last.save(&last)?;
            write_log_csv(&dir.join("logs").join(format!("{}-{noise_index}.csv", method.label())), &outcome.log)?;
            log::info!(
                "{} @ {} dB: best validation {:.3} dB after {} restarts",
                method.label(),
                cfg.noise.inv_r2_db[noise_index],
                outcome.best_val_mse_db,
                outcome.restarts
            );
            out.push(TrainedModel {
                method: method.label(),
                noise_index,
                checkpoint: path,
                best_val_mse_db: outcome.best_val_mse_db,
                restarts: outcome.restarts,
            });
        }
    }
    Ok(out)
}

/// One evaluated row plus the per-trajectory losses behind it.
pub type EvalRow = (ReportRow, Vec<f64>);

/// Scores every selected method on every (test split, noise point). A model-based
/// filter that diverges on the test split is reported with a NaN MSE.
pub fn evaluate_all(cfg: &ExperimentConfig, dir: &Path, only: Option<&[String]>) -> Result<Vec<EvalRow>> {
    let methods = select_methods(cfg, only)?;
    if methods.is_empty() {
        return Ok(Vec::new());
    }
    let manifest = Manifest::load(dir)?;
    manifest.check(cfg)?;
    let (data_model, filter_model) = cfg.models()?;
    // checkpoints first, so a missing artifact fails before any work is done
    let mut nets = Vec::new();
    for method in methods.iter().filter(|m| m.network().is_some()) {
        for noise_index in 0..cfg.noise.inv_r2_db.len() {
            let ckpt = Checkpoint::load(&checkpoint_path(dir, method, noise_index))?;
            nets.push(((method.label(), noise_index), ckpt.network()?, ckpt.hash()));
        }
    }
    let points = cfg.noise.points();
    let mut rows = Vec::new();
    for test_index in 0..cfg.splits.test.len() {
        for (noise_index, noise) in points.iter().enumerate() {
            let test = manifest.load_split(dir, Split::Test, noise_index, test_index)?;
            let mut val: Option<Dataset> = None;
            for method in &methods {
                let (eval, checkpoint) = if let Some((kind, design, tuned)) = method.filter() {
                    let model = if design == DesignModel::Data { &data_model } else { &filter_model };
                    let seed = derive_seed(cfg.seeds.filter, &method.label(), noise_index as u64);
                    let mut chosen: NoiseSpec = *noise;
                    if tuned {
                        if val.is_none() {
                            val = Some(manifest.load_split(dir, Split::Validation, noise_index, 0)?);
                        }
                        let grid = cfg.tuning.as_ref().expect("validated").around(noise);
                        chosen = tune_covariances(kind, model, val.as_ref().expect("loaded"), &grid, seed)?.noise;
                        log::info!("{} @ {} dB tuned to q2={:e} r2={:e}", method.label(), noise.inv_r2_db(), chosen.q2, chosen.r2);
                    }
                    let mut filter = kind.build(model, &chosen.covariances(model.m(), model.n()), seed)?;
                    let eval = match evaluate_filter(filter.as_mut(), &test) {
                        Ok(e) => e,
                        Err(Error::FilterDiverged { step, reason }) => {
                            log::warn!("{} diverged at step {step}: {reason}", method.label());
                            Evaluation { mse_db: f64::NAN, sigma_db: f64::NAN, per_trajectory: Vec::new(), runtime_s: 0.0 }
                        }
                        Err(e) => return Err(e),
                    };
                    (eval, None)
                } else {
                    let (_, net, hash) = nets
                        .iter()
                        .find(|(key, _, _)| key.0 == method.label() && key.1 == noise_index)
                        .expect("loaded above");
                    (evaluate_network(net, &filter_model, &test)?, Some(hash[..16].to_string()))
                };
                rows.push((
                    ReportRow {
                        scenario: cfg.test_label(test_index),
                        method: method.label(),
                        inv_r2_db: cfg.noise.inv_r2_db[noise_index],
                        mse_db: eval.mse_db,
                        sigma_db: eval.sigma_db,
                        runtime_s: Some(eval.runtime_s),
                        checkpoint,
                    },
                    eval.per_trajectory,
                ));
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::config::builtin;
    use crate::bench::data::generate;
    use crate::gainnet::FeatureScaling;
    use crate::trainer::LearnedConfig;

    fn tiny() -> ExperimentConfig {
        let mut cfg = builtin("empty").unwrap();
        cfg.scenario = "tiny".into();
        cfg.methods = vec![
            MethodSpec::Kf { model: DesignModel::Filter, tuned: false },
            MethodSpec::Learned { config: LearnedConfig::C1, scaling: FeatureScaling::Raw, steps: Some(4) },
        ];
        cfg.training.val_every = 2;
        cfg.training.batch_size = 4;
        cfg
    }

    #[test]
    fn empty_method_list_gives_empty_report() {
        let cfg = builtin("empty").unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(evaluate_all(&cfg, dir.path(), None).unwrap().is_empty());
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        generate(&cfg, dir.path(), false).unwrap();
        assert!(matches!(evaluate_all(&cfg, dir.path(), None), Err(Error::MissingArtifact(_))));
        let only = vec!["kf".to_string()];
        assert_eq!(evaluate_all(&cfg, dir.path(), Some(&only)).unwrap().len(), 1);
        let unknown = vec!["nope".to_string()];
        assert!(matches!(evaluate_all(&cfg, dir.path(), Some(&unknown)), Err(Error::Config(_))));
    }

    #[test]
    fn train_then_evaluate_is_reproducible() {
        let cfg = tiny();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut reports = Vec::new();
        for dir in [a.path(), b.path()] {
            generate(&cfg, dir, false).unwrap();
            let trained = train_all(&cfg, dir, None, false).unwrap();
            assert_eq!(trained.len(), 1);
            let rows = evaluate_all(&cfg, dir, None).unwrap();
            assert_eq!(rows.len(), 2);
            reports.push(rows.into_iter().map(|(mut r, _)| { r.runtime_s = None; r }).collect::<Vec<_>>());
        }
        assert_eq!(reports[0], reports[1]);
        assert!(reports[0][1].checkpoint.is_some());
    }
}
