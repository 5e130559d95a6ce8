//! Supervised training of learned estimators: mini-batch loss, Adam, the three
//! backpropagation-through-time regimes, validation and checkpointing.

mod adam;
mod eval;
mod loss;

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::gainnet::checkpoint::Checkpoint;
use crate::gainnet::{Architecture, FeatureMask, FeatureScaling, GainNetConfig, Network, NetworkSpec};
use crate::ssm::{trajectory_rng, Dataset, SSModel, Trajectory};

pub use adam::{AdamConfig, AdamState};
pub use eval::{evaluate_filter, evaluate_network, network_estimates, Evaluation};
pub use loss::{batch_loss, trajectory_loss, BatchLoss};

/// How trajectories are cut before backpropagation through time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bptt {
    /// V1: one unrolled graph per full trajectory.
    Whole,
    /// V2: every trajectory is split into consecutive segments of `segment` steps
    /// (a trailing remainder is dropped); each segment restarts the recursion from
    /// the true state preceding it.
    Split { segment: usize },
    /// V3: only the first `length` steps of each trajectory are used.
    Truncate { length: usize },
}

impl Bptt {
    /// Training units derived from a dataset.
    pub fn units(&self, data: &Dataset) -> Result<Vec<Trajectory>> {
        let mut out = Vec::new();
        for traj in &data.trajectories {
            match *self {
                Bptt::Whole => out.push(traj.clone()),
                Bptt::Split { segment } => {
                    if segment == 0 {
                        return Err(Error::Config("split segment length must be at least 1".into()));
                    }
                    for k in 0..traj.len() / segment {
                        out.push(traj.segment(k * segment, segment)?);
                    }
                }
                Bptt::Truncate { length } => {
                    if length == 0 {
                        return Err(Error::Config("truncation length must be at least 1".into()));
                    }
                    out.push(traj.segment(0, length.min(traj.len()))?);
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no training units: segments longer than every trajectory".into()));
        }
        Ok(out)
    }
}

fn default_lr() -> f64 {
    1e-3
}

fn default_gamma() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    8
}

fn default_val_every() -> usize {
    25
}

fn default_clamp() -> f64 {
    1e6
}

fn default_restarts() -> usize {
    5
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Number of optimizer steps.
    pub steps: usize,
    pub bptt: Bptt,
    #[serde(default)]
    pub seed: u64,
    /// Validation cadence in optimizer steps.
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    /// Stop after this many validations without improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Batches with a loss above this value (or non-finite) are skipped.
    #[serde(default = "default_clamp")]
    pub loss_clamp: f64,
    /// Rescale the gradient when its global norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_restarts")]
    pub max_restarts: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(steps: usize, bptt: Bptt) -> Self {
        Self {
            lr: default_lr(),
            gamma: default_gamma(),
            batch_size: default_batch(),
            steps,
            bptt,
            seed: 0,
            val_every: default_val_every(),
            patience: None,
            loss_clamp: default_clamp(),
            clip_norm: None,
            max_restarts: default_restarts(),
            adam: AdamConfig::default(),
        }
    }

    fn validate(&self, units: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > units {
            return Err(Error::Config(format!("batch size {} must be in 1..={units}", self.batch_size)));
        }
        if !(self.lr > 0.0) || self.gamma < 0.0 || self.val_every == 0 {
            return Err(Error::Config("lr must be positive, gamma non-negative, val_every at least 1".into()));
        }
        Ok(())
    }
}

/// The four learned-filter settings: architecture, input features and BPTT regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearnedConfig {
    /// Arch1, features {F2, F4}, truncated prefixes.
    C1,
    /// Arch1, features {F2, F4}, whole trajectories.
    C2,
    /// Arch1, features {F1, F3, F4}, split long trajectories.
    C3,
    /// Arch2, all features, whole trajectories.
    C4,
}

impl LearnedConfig {
    pub fn network_spec(&self, scaling: FeatureScaling) -> NetworkSpec {
        let (architecture, features) = match self {
            LearnedConfig::C1 | LearnedConfig::C2 => (Architecture::arch1(), FeatureMask::INNOVATION_UPDATE),
            LearnedConfig::C3 => (Architecture::arch1(), FeatureMask::OBSERVATION_EVOLUTION_UPDATE),
            LearnedConfig::C4 => (Architecture::arch2(), FeatureMask::ALL),
        };
        NetworkSpec::GainNet(GainNetConfig { architecture, features, scaling })
    }

    /// BPTT regime; `length` is the truncation or segment length where one applies.
    pub fn bptt(&self, length: usize) -> Bptt {
        match self {
            LearnedConfig::C1 => Bptt::Truncate { length },
            LearnedConfig::C2 | LearnedConfig::C4 => Bptt::Whole,
            LearnedConfig::C3 => Bptt::Split { segment: length },
        }
    }
}

/// One line of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_mse_db: Option<f64>,
    pub lr: f64,
    pub wall_clock: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation MSE.
    pub best: Checkpoint,
    /// Full state after the last step, for resuming.
    pub last: Checkpoint,
    pub best_val_mse_db: f64,
    pub log: Vec<LogRow>,
    pub restarts: usize,
    pub skipped_batches: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Progress {
    step: usize,
    lr: f64,
    best_val_mse_db: f64,
    best_step: usize,
    stale_validations: usize,
    skipped_in_row: usize,
    skipped_total: usize,
    restarts: usize,
    adam_steps: u64,
    config_fingerprint: String,
}

/// Stable hash of the training configuration (step budget excluded) and network spec.
pub fn config_fingerprint(cfg: &TrainConfig, spec: &NetworkSpec) -> String {
    let text = serde_json::to_string(&(TrainConfig { steps: 0, ..*cfg }, spec)).expect("configs serialize");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

struct Session<'a> {
    model: &'a SSModel,
    validation: &'a Dataset,
    cfg: TrainConfig,
    units: Vec<Trajectory>,
    adam: AdamState,
    best: Vec<DMatrix<f64>>,
    progress: Progress,
    log: Vec<LogRow>,
    started: Instant,
}

/// Trains `net` in place; at return it holds the best-validation parameters.
pub fn train(net: &mut Network, model: &SSModel, train: &Dataset, validation: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let units = cfg.bptt.units(train)?;
    cfg.validate(units.len())?;
    net.check_model(model)?;
    let adam = AdamState::new(net.params().values(), cfg.adam);
    let progress = Progress {
        step: 0,
        lr: cfg.lr,
        best_val_mse_db: f64::INFINITY,
        best_step: 0,
        stale_validations: 0,
        skipped_in_row: 0,
        skipped_total: 0,
        restarts: 0,
        adam_steps: 0,
        config_fingerprint: config_fingerprint(cfg, net.spec()),
    };
    let best = net.params().values().to_vec();
    let session = Session { model, validation, cfg: *cfg, units, adam, best, progress, log: Vec::new(), started: Instant::now() };
    session.run(net)
}

/// Continues a run from the `last` checkpoint of an earlier [`train`] call with the
/// same data and configuration; `cfg.steps` is the new total step count.
pub fn resume(
    net: &mut Network,
    model: &SSModel,
    train: &Dataset,
    validation: &Dataset,
    cfg: &TrainConfig,
    from: &Checkpoint,
) -> Result<TrainOutcome> {
    let units = cfg.bptt.units(train)?;
    cfg.validate(units.len())?;
    let progress: Progress = serde_json::from_value(from.header.meta.get("progress").cloned().unwrap_or_default())
        .map_err(|e| Error::Format(format!("checkpoint has no resumable progress: {e}")))?;
    if progress.config_fingerprint != config_fingerprint(cfg, &from.header.network) {
        log::warn!("resuming with a configuration that differs from the checkpoint");
    }
    *net = from.network()?;
    let tensors = |prefix: &str| -> Result<Vec<DMatrix<f64>>> {
        net.params()
            .names()
            .iter()
            .map(|n| {
                from.tensor(&format!("{prefix}{n}")).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{n}")))
            })
            .collect()
    };
    let mut adam = AdamState::new(net.params().values(), cfg.adam);
    adam.first = tensors("adam.m.")?;
    adam.second = tensors("adam.v.")?;
    adam.steps = progress.adam_steps;
    let best = tensors("best.")?;
    let session = Session { model, validation, cfg: *cfg, units, adam, best, progress, log: Vec::new(), started: Instant::now() };
    session.run(net)
}

impl Session<'_> {
    fn batches_per_epoch(&self) -> usize {
        self.units.len().div_ceil(self.cfg.batch_size)
    }

    /// Unit indices of optimizer step `step` (0-based); shuffles depend only on
    /// the seed and the epoch index.
    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let (epoch, pos) = (step / per_epoch, step % per_epoch);
        let mut order: Vec<usize> = (0..self.units.len()).collect();
        order.shuffle(&mut trajectory_rng(self.cfg.seed ^ 0x5eed_7a1a, epoch as u64));
        let start = pos * self.cfg.batch_size;
        order[start..(start + self.cfg.batch_size).min(order.len())].to_vec()
    }

    fn run(mut self, net: &mut Network) -> Result<TrainOutcome> {
        while self.progress.step < self.cfg.steps {
            let step = self.progress.step;
            let batch: Vec<&Trajectory> = self.batch_indices(step).into_iter().map(|i| &self.units[i]).collect();
            let outcome = batch_loss(net, self.model, &batch, self.cfg.gamma);
            let train_loss = match outcome {
                Ok(mut bl) if bl.loss.is_finite() && bl.loss <= self.cfg.loss_clamp => {
                    if let Some(limit) = self.cfg.clip_norm {
                        let norm = bl.gradients.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
                        if norm > limit {
                            bl.gradients.iter_mut().for_each(|g| *g *= limit / norm);
                        }
                    }
                    if self.adam.step(net.params_mut().values_mut(), &bl.gradients, self.progress.lr)? {
                        self.progress.skipped_in_row = 0;
                    } else {
                        self.skip(net)?;
                    }
                    bl.loss
                }
                Ok(bl) => {
                    log::warn!("step {}: batch loss {} exceeds the clamp, skipped", step + 1, bl.loss);
                    self.skip(net)?;
                    bl.loss.min(self.cfg.loss_clamp)
                }
                Err(Error::FilterDiverged { .. }) => {
                    log::warn!("step {}: rollout diverged, batch skipped", step + 1);
                    self.skip(net)?;
                    self.cfg.loss_clamp
                }
                Err(e) => return Err(e),
            };
            self.progress.step += 1;
            let done = self.progress.step == self.cfg.steps;
            let val = if self.progress.step % self.cfg.val_every == 0 || done { Some(self.validate(net)?) } else { None };
            self.log.push(LogRow {
                step: self.progress.step,
                train_loss,
                val_mse_db: val,
                lr: self.progress.lr,
                wall_clock: self.started.elapsed().as_secs_f64(),
            });
            if let (Some(patience), Some(_)) = (self.cfg.patience, val) {
                if self.progress.stale_validations >= patience {
                    log::info!("early stop at step {}", self.progress.step);
                    break;
                }
            }
        }
        if self.progress.best_val_mse_db == f64::INFINITY {
            self.validate(net)?;
        }
        self.finish(net)
    }

    fn validate(&mut self, net: &mut Network) -> Result<f64> {
        let db = match evaluate_network(net, self.model, self.validation) {
            Ok(e) if e.mse_db.is_finite() => e.mse_db,
            Ok(_) | Err(Error::FilterDiverged { .. }) => {
                self.restart(net)?;
                return Ok(f64::INFINITY);
            }
            Err(e) => return Err(e),
        };
        if db < self.progress.best_val_mse_db {
            self.progress.best_val_mse_db = db;
            self.progress.best_step = self.progress.step;
            self.progress.stale_validations = 0;
            self.best = net.params().values().to_vec();
        } else {
            self.progress.stale_validations += 1;
        }
        Ok(db)
    }

    fn skip(&mut self, net: &mut Network) -> Result<()> {
        self.progress.skipped_in_row += 1;
        self.progress.skipped_total += 1;
        if self.progress.skipped_in_row >= 3 {
            self.restart(net)?;
        }
        Ok(())
    }

    /// Divergence policy: back to the best parameters with half the learning rate.
    fn restart(&mut self, net: &mut Network) -> Result<()> {
        if self.progress.restarts >= self.cfg.max_restarts {
            return Err(Error::FilterDiverged {
                step: self.progress.step,
                reason: format!("training diverged {} times", self.progress.restarts + 1),
            });
        }
        self.progress.restarts += 1;
        self.progress.lr /= 2.0;
        self.progress.skipped_in_row = 0;
        for (dst, src) in net.params_mut().values_mut().iter_mut().zip(&self.best) {
            dst.copy_from(src);
        }
        self.adam = AdamState::new(net.params().values(), self.cfg.adam);
        log::warn!("restart {} at step {} with lr {}", self.progress.restarts, self.progress.step, self.progress.lr);
        Ok(())
    }

    fn finish(mut self, net: &mut Network) -> Result<TrainOutcome> {
        self.progress.adam_steps = self.adam.steps;
        let progress = serde_json::to_value(&self.progress).expect("progress serializes");
        let mut last = Checkpoint::from_network(net, serde_json::json!({ "progress": progress }));
        let names: Vec<String> = net.params().names().to_vec();
        for (prefix, tensors) in [("adam.m.", &self.adam.first), ("adam.v.", &self.adam.second), ("best.", &self.best)] {
            for (name, t) in names.iter().zip(tensors.iter()) {
                last.tensors.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        for (dst, src) in net.params_mut().values_mut().iter_mut().zip(&self.best) {
            dst.copy_from(src);
        }
        let best = Checkpoint::from_network(
            net,
            serde_json::json!({
                "best_val_mse_db": self.progress.best_val_mse_db,
                "step": self.progress.best_step,
                "config_fingerprint": self.progress.config_fingerprint,
            }),
        );
        Ok(TrainOutcome {
            best,
            last,
            best_val_mse_db: self.progress.best_val_mse_db,
            log: self.log,
            restarts: self.progress.restarts,
            skipped_batches: self.progress.skipped_total,
        })
    }
}
