//! Planar localization from odometry: CSV import, a synthetic source with the same
//! schema, and the filter comparison on position error.
//!
//! Schema (header row required, comma separated):
//! - ground truth: `utime,x,y` with `utime` in microseconds and positions in metres;
//! - odometry: `utime,vx,vy` with velocity readings in metres per second.
//!
//! The state is `(p_x, v_x, p_y, v_y)`; observations are the two velocity readings.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::derive_seed;
use super::data::{load_dataset, save_dataset};
use super::report::ReportRow;
use crate::error::{Error, Result};
use crate::filters::{tune_covariances_with, FilterKind, StateFilter};
use crate::fsutil::{read_artifact, read_artifact_string, write_atomic};
use crate::gainnet::{FeatureScaling, Network, NetworkSpec};
use crate::metrics::{aggregate_db, to_db};
use crate::ssm::{
    dead_reckoning, linear_model, simulate_with, trajectory_rng, wiener_velocity_model, Covariances, Dataset, NoiseSpec, Split,
    Trajectory,
};
use crate::trainer::{network_estimates, train, write_log_csv, Bptt, LearnedConfig, TrainConfig};

pub const GT_HEADER: [&str; 3] = ["utime", "x", "y"];
pub const ODOMETRY_HEADER: [&str; 3] = ["utime", "vx", "vy"];
/// Position rows of the state.
const POSITION: [usize; 2] = [0, 2];
const VELOCITY: [usize; 2] = [1, 3];

fn default_rate() -> f64 {
    1.0
}

fn default_gap() -> f64 {
    2.0
}

fn default_regressions() -> f64 {
    0.01
}

fn default_fractions() -> [f64; 3] {
    [0.85, 0.10, 0.05]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportConfig {
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    /// Largest allowed distance, in seconds, between a resampling instant and the
    /// nearest reading of either stream.
    #[serde(default = "default_gap")]
    pub max_gap_s: f64,
    /// Timestamp regressions are dropped as unstable readings up to this fraction of
    /// the rows; beyond it the file is rejected as unordered.
    #[serde(default = "default_regressions")]
    pub max_regression_fraction: f64,
    /// Train, validation and test fractions of the resampled steps.
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    pub train_segment: usize,
    pub validation_segment: usize,
    /// `None` keeps the whole test part as one sequence.
    #[serde(default)]
    pub test_segment: Option<usize>,
}

impl ImportConfig {
    fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if !(self.rate_hz > 0.0) || !(self.max_gap_s > 0.0) || self.fractions.iter().any(|f| !(*f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("rate and gap must be positive and the split fractions positive summing to 1".into()));
        }
        if self.train_segment == 0 || self.validation_segment == 0 || self.test_segment == Some(0) {
            return Err(Error::Config("segment lengths must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dtau(&self) -> f64 {
        1.0 / self.rate_hz
    }
}

/// Source of synthetic data: a Wiener-velocity path sampled at `native_hz` with
/// noisy velocity readings, timestamps jittered by up to `jitter_us`.
/// With `tether_s` the acceleration also carries a critically damped pull
/// towards the origin with that time constant, which keeps a long run inside a
/// campus-sized area the way a real survey loop does. Each reading independently
/// slips with probability `slip_probability`, adding noise of variance
/// `slip_r2` on both axes, as wheel odometry does on loose ground.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub duration_s: f64,
    pub native_hz: f64,
    /// Acceleration noise intensity of the ground-truth path.
    pub q2: f64,
    /// Variance of each velocity reading.
    pub r2: f64,
    #[serde(default)]
    pub jitter_us: u64,
    /// Rows with a NaN reading inserted into the odometry stream.
    #[serde(default)]
    pub corrupt_rows: usize,
    #[serde(default)]
    pub tether_s: Option<f64>,
    #[serde(default)]
    pub slip_probability: f64,
    #[serde(default)]
    pub slip_r2: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSearch {
    pub q2: Vec<f64>,
    pub r2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcltConfig {
    pub import: ImportConfig,
    pub grid: NoiseSearch,
    pub training: TrainConfig,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    7
}

impl NcltConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: NcltConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.import.validate()?;
        if cfg.grid.q2.is_empty() || cfg.grid.r2.is_empty() {
            return Err(Error::Config("noise search grid axes must be non-empty".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_artifact_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configs serialize to TOML")
    }

    /// Desk-scale defaults with a synthetic source of about 5850 one-second steps.
    pub fn desk() -> Self {
        let mut training = TrainConfig::new(600, Bptt::Whole);
        training.lr = 3e-3;
        training.batch_size = 4;
        NcltConfig {
            import: ImportConfig {
                rate_hz: 1.0,
                max_gap_s: default_gap(),
                max_regression_fraction: default_regressions(),
                fractions: default_fractions(),
                train_segment: 200,
                validation_segment: 200,
                test_segment: None,
            },
            grid: NoiseSearch { q2: vec![1e-3, 1e-2, 1e-1, 1.0], r2: vec![0.01, 0.1, 1.0] },
            training,
            synthetic: Some(SyntheticConfig {
                duration_s: 5850.0,
                native_hz: 10.0,
                q2: 0.01,
                r2: 0.01,
                jitter_us: 2_000,
                corrupt_rows: 5,
                tether_s: Some(300.0),
                slip_probability: 0.1,
                slip_r2: 4.0,
                seed: 3,
            }),
            seed: default_seed(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub utime: Vec<i64>,
    pub values: Vec<[f64; 2]>,
}

/// Rows dropped while reading one stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub non_finite: usize,
    pub regressions: usize,
}

pub fn read_stream(bytes: &[u8], header: [&str; 3], max_regression_fraction: f64) -> Result<(Stream, Dropped)> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Format(format!("expected columns {header:?}, found {found:?}")));
    }
    let mut stream = Stream { utime: Vec::new(), values: Vec::new() };
    let mut dropped = Dropped::default();
    let mut rows = 0usize;
    for rec in r.records() {
        let rec = rec?;
        rows += 1;
        if rec.len() != 3 {
            return Err(Error::Format(format!("row {rows} has {} fields", rec.len())));
        }
        let utime: i64 = rec[0].parse().map_err(|_| Error::Format(format!("row {rows}: bad timestamp {:?}", &rec[0])))?;
        let a: f64 = rec[1].parse().map_err(|_| Error::Format(format!("row {rows}: bad value {:?}", &rec[1])))?;
        let b: f64 = rec[2].parse().map_err(|_| Error::Format(format!("row {rows}: bad value {:?}", &rec[2])))?;
        if !(a.is_finite() && b.is_finite()) {
            dropped.non_finite += 1;
            continue;
        }
        if stream.utime.last().is_some_and(|last| utime <= *last) {
            dropped.regressions += 1;
            continue;
        }
        stream.utime.push(utime);
        stream.values.push([a, b]);
    }
    if rows == 0 || stream.utime.len() < 3 {
        return Err(Error::Format("stream needs at least three valid rows".into()));
    }
    if dropped.regressions as f64 > max_regression_fraction * rows as f64 {
        return Err(Error::Format(format!("timestamps are not ordered: {} of {rows} rows regress", dropped.regressions)));
    }
    Ok((stream, dropped))
}

/// Index of the reading nearest to each instant; `times` and `grid` must be increasing.
fn nearest(times: &[i64], grid: &[i64], max_gap_us: i64) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(grid.len());
    let mut j = 0;
    for &t in grid {
        while j + 1 < times.len() && (times[j + 1] - t).abs() <= (times[j] - t).abs() {
            j += 1;
        }
        if (times[j] - t).abs() > max_gap_us {
            return Err(Error::Format(format!("coverage gap: no reading within {max_gap_us} us of {t}")));
        }
        out.push(j);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Imported {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub steps: usize,
    pub dropped_ground_truth: Dropped,
    pub dropped_odometry: Dropped,
}

/// Resampled states (ground-truth positions plus finite-difference velocities) and
/// velocity readings, one column per resampling instant.
pub fn resample(gt: &Stream, odo: &Stream, cfg: &ImportConfig) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let start = gt.utime[0].max(odo.utime[0]);
    let end = *gt.utime.last().expect("non-empty").min(odo.utime.last().expect("non-empty"));
    let step_us = (1e6 / cfg.rate_hz).round() as i64;
    if step_us <= 0 || end - start < 2 * step_us {
        return Err(Error::Format("the two streams overlap for less than three samples".into()));
    }
    let grid: Vec<i64> = (0..).map(|k| start + k * step_us).take_while(|t| *t <= end).collect();
    let gap = (cfg.max_gap_s * 1e6) as i64;
    let gi = nearest(&gt.utime, &grid, gap)?;
    let oi = nearest(&odo.utime, &grid, gap)?;
    let len = grid.len();
    let dt = cfg.dtau();
    let mut states = DMatrix::zeros(4, len);
    let mut readings = DMatrix::zeros(2, len);
    for k in 0..len {
        for axis in 0..2 {
            states[(POSITION[axis], k)] = gt.values[gi[k]][axis];
            readings[(axis, k)] = odo.values[oi[k]][axis];
        }
    }
    for k in 0..len {
        let (lo, hi) = (k.saturating_sub(1), (k + 1).min(len - 1));
        for axis in 0..2 {
            let p = POSITION[axis];
            states[(VELOCITY[axis], k)] = (states[(p, hi)] - states[(p, lo)]) / ((hi - lo) as f64 * dt);
        }
    }
    Ok((states, readings))
}

fn segments(states: &DMatrix<f64>, readings: &DMatrix<f64>, from: usize, to: usize, seg: Option<usize>, split: Split) -> Result<Dataset> {
    // steps `from..to` (1-based columns of the resampled sequence); column `from - 1` is x0
    let total = to - from;
    let seg = seg.unwrap_or(total);
    if seg > total || seg == 0 {
        return Err(Error::Config(format!("{} part has {total} steps, fewer than its segment length {seg}", split.as_str())));
    }
    let trajectories = (0..total / seg)
        .map(|k| {
            let s = from + k * seg;
            Trajectory::new(
                states.column(s - 1).into_owned(),
                states.columns(s, seg).into_owned(),
                readings.columns(s, seg).into_owned(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories, split)
}

/// Imports the two CSV streams and cuts contiguous train/validation/test parts.
pub fn import(gt_csv: &[u8], odometry_csv: &[u8], cfg: &ImportConfig) -> Result<Imported> {
    cfg.validate()?;
    let (gt, dropped_ground_truth) = read_stream(gt_csv, GT_HEADER, cfg.max_regression_fraction)?;
    let (odo, dropped_odometry) = read_stream(odometry_csv, ODOMETRY_HEADER, cfg.max_regression_fraction)?;
    if dropped_ground_truth != Dropped::default() || dropped_odometry != Dropped::default() {
        log::warn!("dropped unstable readings: ground truth {dropped_ground_truth:?}, odometry {dropped_odometry:?}");
    }
    let (states, readings) = resample(&gt, &odo, cfg)?;
    let steps = states.ncols() - 1;
    let n_train = (cfg.fractions[0] * steps as f64).round() as usize;
    let n_val = (cfg.fractions[1] * steps as f64).round() as usize;
    let (a, b, c) = (1, 1 + n_train, 1 + n_train + n_val);
    Ok(Imported {
        train: segments(&states, &readings, a, b, Some(cfg.train_segment), Split::Train)?,
        validation: segments(&states, &readings, b, c, Some(cfg.validation_segment), Split::Validation)?,
        test: segments(&states, &readings, c, steps + 1, cfg.test_segment, Split::Test)?,
        steps,
        dropped_ground_truth,
        dropped_odometry,
    })
}

fn stream_csv(header: [&str; 3], rows: &[(i64, [f64; 2])]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for (t, v) in rows {
        w.write_record([t.to_string(), format!("{:.9}", v[0]), format!("{:.9}", v[1])])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Ground-truth and odometry CSVs drawn from a Wiener-velocity path.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<(Vec<u8>, Vec<u8>)> {
    if !(cfg.native_hz > 0.0 && cfg.duration_s > 0.0 && cfg.q2 >= 0.0 && cfg.r2 >= 0.0)
        || !(0.0..=1.0).contains(&cfg.slip_probability)
        || !(cfg.slip_r2 >= 0.0)
    {
        return Err(Error::Config("synthetic source needs positive rate and duration and non-negative noise".into()));
    }
    let dt = 1.0 / cfg.native_hz;
    let len = (cfg.duration_s * cfg.native_hz).round() as usize;
    let (mut model, q) = wiener_velocity_model(dt, cfg.q2)?;
    if let Some(tau) = cfg.tether_s {
        if !(tau > 0.0) {
            return Err(Error::Config("tether time constant must be positive".into()));
        }
        let mut f = DMatrix::<f64>::identity(4, 4);
        let mut h = DMatrix::zeros(2, 4);
        for o in [0, 2] {
            f[(o, o + 1)] = dt;
            f[(o + 1, o)] = -dt / (tau * tau);
            f[(o + 1, o + 1)] = 1.0 - 2.0 * dt / tau;
            h[(o / 2, o + 1)] = 1.0;
        }
        model = linear_model(f, h)?;
    }
    let cov = Covariances::new(q, DMatrix::identity(2, 2) * cfg.r2)?;
    let mut rng = trajectory_rng(cfg.seed, 0);
    let x0 = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.5]);
    let path = simulate_with(&model, &cov, &x0, len, &mut rng)?;
    let t0: i64 = 1_326_000_000_000_000;
    let mut gt = Vec::with_capacity(len);
    let mut odo = Vec::with_capacity(len);
    for k in 0..len {
        let jitter = |rng: &mut rand_chacha::ChaCha8Rng| {
            if cfg.jitter_us == 0 { 0 } else { rng.gen_range(0..=cfg.jitter_us) as i64 }
        };
        let t = t0 + (k as f64 * dt * 1e6).round() as i64;
        let x = path.states.column(k);
        gt.push((t + jitter(&mut rng), [x[0], x[2]]));
        let mut reading = [path.observations[(0, k)], path.observations[(1, k)]];
        if cfg.slip_probability > 0.0 && rng.gen_bool(cfg.slip_probability) {
            let scale = cfg.slip_r2.sqrt();
            for r in &mut reading {
                *r += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        odo.push((t + jitter(&mut rng), reading));
    }
    for i in 0..cfg.corrupt_rows.min(len) {
        let k = (i * 7919 + 13) % len;
        odo[k].1[i % 2] = f64::NAN;
    }
    Ok((stream_csv(GT_HEADER, &gt)?, stream_csv(ODOMETRY_HEADER, &odo)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ImportSummary {
    steps: usize,
    train: usize,
    validation: usize,
    test: usize,
    dropped_ground_truth: Dropped,
    dropped_odometry: Dropped,
}

/// Imports `gt` and `odometry` into `dir` as dataset files plus a summary.
pub fn import_files(gt: &Path, odometry: &Path, cfg: &ImportConfig, dir: &Path) -> Result<Imported> {
    let imported = import(&read_artifact(gt)?, &read_artifact(odometry)?, cfg)?;
    for data in [&imported.train, &imported.validation, &imported.test] {
        save_dataset(&dir.join(format!("{}.lkd", data.split.as_str())), data)?;
    }
    let summary = ImportSummary {
        steps: imported.steps,
        train: imported.train.len(),
        validation: imported.validation.len(),
        test: imported.test.len(),
        dropped_ground_truth: imported.dropped_ground_truth,
        dropped_odometry: imported.dropped_odometry,
    };
    write_atomic(&dir.join("import.toml"), toml::to_string_pretty(&summary).expect("toml").as_bytes())?;
    Ok(imported)
}

pub fn load_imported(dir: &Path) -> Result<(Dataset, Dataset, Dataset)> {
    Ok((
        load_dataset(&dir.join("train.lkd"), Split::Train)?,
        load_dataset(&dir.join("validation.lkd"), Split::Validation)?,
        load_dataset(&dir.join("test.lkd"), Split::Test)?,
    ))
}

fn position_mse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let mut sum = 0.0;
    for row in POSITION {
        sum += (estimate.row(row) - truth.row(row)).norm_squared();
    }
    sum / (POSITION.len() * truth.ncols()) as f64
}

fn filter_positions(filter: &mut dyn StateFilter, data: &Dataset) -> Result<Vec<f64>> {
    data.trajectories.iter().map(|t| Ok(position_mse(&filter.run(t)?, &t.states))).collect()
}

/// Integrated-velocity estimate with the velocity readings as the velocity estimate.
pub fn dead_reckoning_estimate(traj: &Trajectory, dtau: f64) -> DMatrix<f64> {
    let p0 = DVector::from_vec(vec![traj.x0[POSITION[0]], traj.x0[POSITION[1]]]);
    let pos = dead_reckoning(&p0, &traj.observations, dtau);
    let mut out = DMatrix::zeros(4, traj.len());
    for axis in 0..2 {
        out.set_row(POSITION[axis], &pos.row(axis));
        out.set_row(VELOCITY[axis], &traj.observations.row(axis));
    }
    out
}

fn row(method: &str, inv_r2_db: f64, losses: &[f64], runtime: f64, checkpoint: Option<String>) -> ReportRow {
    let (mse_db, sigma_db) = aggregate_db(losses);
    ReportRow {
        scenario: "nclt".into(),
        method: method.into(),
        inv_r2_db,
        mse_db,
        sigma_db,
        runtime_s: Some(runtime),
        checkpoint,
    }
}

/// Dead reckoning, the grid-tuned KF, a vanilla RNN and the learned filter (C1) on
/// position MSE. Checkpoints and training logs go to `out_dir` when given.
pub fn run_experiment(cfg: &NcltConfig, data: (&Dataset, &Dataset, &Dataset), out_dir: Option<&Path>) -> Result<Vec<ReportRow>> {
    let (train_set, val, test) = data;
    let dtau = cfg.import.dtau();
    let grid: Vec<NoiseSpec> =
        cfg.grid.q2.iter().flat_map(|q2| cfg.grid.r2.iter().map(move |r2| NoiseSpec { q2: *q2, r2: *r2 })).collect();
    let (model, _) = wiener_velocity_model(dtau, 1.0)?;
    let covariances = |s: &NoiseSpec| -> Covariances {
        let (_, q) = wiener_velocity_model(dtau, s.q2).expect("positive dtau");
        Covariances { q, r: DMatrix::identity(2, 2) * s.r2 }
    };
    let tuned = tune_covariances_with(FilterKind::Kf, &model, val, &grid, cfg.seed, covariances)?;
    let inv_r2_db = to_db(1.0 / tuned.noise.r2);
    let mut rows = Vec::new();

    let t0 = Instant::now();
    let dr: Vec<f64> = test.trajectories.iter().map(|t| position_mse(&dead_reckoning_estimate(t, dtau), &t.states)).collect();
    rows.push(row("dead-reckoning", inv_r2_db, &dr, t0.elapsed().as_secs_f64(), None));

    let mut kf = FilterKind::Kf.build(&model, &covariances(&tuned.noise), cfg.seed)?;
    let t0 = Instant::now();
    let kf_losses = filter_positions(kf.as_mut(), test)?;
    rows.push(row("kf-tuned", inv_r2_db, &kf_losses, t0.elapsed().as_secs_f64(), None));

    let nets = [
        ("vanilla-rnn", NetworkSpec::VanillaRnn { rho: super::config::BASELINE_RHO }, Bptt::Whole),
        ("learned-c1", LearnedConfig::C1.network_spec(FeatureScaling::Raw), LearnedConfig::C1.bptt(cfg.import.train_segment)),
    ];
    for (label, spec, bptt) in nets {
        let seed = derive_seed(cfg.seed, label, 0);
        let mut tcfg = cfg.training;
        tcfg.bptt = bptt;
        tcfg.seed = seed;
        tcfg.batch_size = tcfg.batch_size.min(train_set.len());
        let mut net = Network::new(spec, 4, 2, seed)?;
        let outcome = match train(&mut net, &model, train_set, val, &tcfg) {
            Ok(o) => o,
            Err(Error::FilterDiverged { reason, .. }) => {
                // a baseline that cannot be trained is reported, not fatal
                log::warn!("{label} failed to train: {reason}");
                rows.push(row(label, inv_r2_db, &[], 0.0, None));
                continue;
            }
            Err(e) => return Err(e),
        };
        let hash = outcome.best.hash();
        if let Some(dir) = out_dir {
            outcome.best.save(&dir.join("checkpoints").join(format!("{label}.ckpt")))?;
            write_log_csv(&dir.join("logs").join(format!("{label}.csv")), &outcome.log)?;
        }
        let t0 = Instant::now();
        let trajs: Vec<&Trajectory> = test.trajectories.iter().collect();
        let estimates = network_estimates(&net, &model, &trajs)?;
        let losses: Vec<f64> = estimates.iter().zip(&trajs).map(|(e, t)| position_mse(e, &t.states)).collect();
        rows.push(row(label, inv_r2_db, &losses, t0.elapsed().as_secs_f64(), Some(hash[..16].to_string())));
    }
    Ok(rows)
}
