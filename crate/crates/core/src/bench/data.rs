//! Dataset files and the generation manifest.
//!
//! A dataset file is `LKFDATA\0`, a little-endian `u32` version and trajectory count,
//! then per trajectory `m, n, T` as `u32` followed by `x0`, the states and the
//! observations as column-major little-endian `f64`.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{derive_seed, ExperimentConfig, ModelSpec};
use crate::error::{Error, Result};
use crate::fsutil::{read_artifact, read_artifact_string, write_atomic};
use crate::ssm::{generate_dataset, simulate_decimated, trajectory_rng, Dataset, InitialState, NoiseSpec, Split, Trajectory};

const MAGIC: &[u8; 8] = b"LKFDATA\0";
const VERSION: u32 = 1;

pub fn dataset_to_bytes(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    for traj in &data.trajectories {
        for dim in [traj.m(), traj.n(), traj.len()] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in traj.x0.iter().chain(traj.states.iter()).chain(traj.observations.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(len).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("dataset file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let raw = self.take(rows * cols * 8)?;
        Ok(DMatrix::from_iterator(rows, cols, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))))
    }
}

pub fn dataset_from_bytes(bytes: &[u8], split: Split) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = r.u32()?;
    let mut trajectories = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (m, n, len) = (r.u32()?, r.u32()?, r.u32()?);
        let x0 = DVector::from_column_slice(r.matrix(m, 1)?.as_slice());
        let states = r.matrix(m, len)?;
        let observations = r.matrix(n, len)?;
        trajectories.push(Trajectory::new(x0, states, observations).map_err(|e| Error::Format(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last trajectory".into()));
    }
    Dataset::new(trajectories, split).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<String> {
    let bytes = dataset_to_bytes(data);
    write_atomic(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    dataset_from_bytes(&read_artifact(path)?, split)
}

/// Long-format CSV: one row per time step with the trajectory index, the step,
/// then `x_*` and `y_*` columns. Step 0 carries the initial state and no observation.
pub fn dataset_to_csv(data: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["trajectory".to_string(), "t".to_string()];
    header.extend((0..data.m()).map(|i| format!("x{i}")));
    header.extend((0..data.n()).map(|i| format!("y{i}")));
    w.write_record(&header)?;
    for (k, traj) in data.trajectories.iter().enumerate() {
        let mut row = vec![k.to_string(), "0".to_string()];
        row.extend(traj.x0.iter().map(|v| v.to_string()));
        row.extend((0..traj.n()).map(|_| String::new()));
        w.write_record(&row)?;
        for t in 0..traj.len() {
            let mut row = vec![k.to_string(), (t + 1).to_string()];
            row.extend(traj.states.column(t).iter().map(|v| v.to_string()));
            row.extend(traj.observations.column(t).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub split: Split,
    /// Index into the noise grid.
    pub noise_index: usize,
    /// Index into the list of test splits; 0 for training and validation.
    pub test_index: usize,
    pub inv_r2_db: f64,
    pub seed: u64,
    pub count: usize,
    pub len: usize,
    /// Relative to the manifest directory.
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub config_hash: String,
    /// Hash of the data-determining part of the configuration.
    pub data_hash: String,
    pub data_fingerprint: String,
    pub filter_fingerprint: String,
    pub datasets: Vec<DatasetEntry>,
}

pub const MANIFEST: &str = "manifest.toml";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = read_artifact_string(&dir.join(MANIFEST))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("manifests serialize to TOML");
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    fn entry(&self, split: Split, noise_index: usize, test_index: usize) -> Result<&DatasetEntry> {
        self.datasets
            .iter()
            .find(|e| e.split == split && e.noise_index == noise_index && e.test_index == test_index)
            .ok_or_else(|| {
                Error::MissingArtifact(PathBuf::from(format!("{}-{noise_index}-{test_index}.lkd", split.as_str())))
            })
    }

    /// Loads one dataset and checks its content hash against the manifest.
    pub fn load_split(&self, dir: &Path, split: Split, noise_index: usize, test_index: usize) -> Result<Dataset> {
        let entry = self.entry(split, noise_index, test_index)?;
        let path = dir.join(&entry.file);
        let bytes = read_artifact(&path)?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Format(format!("{} does not match its manifest hash", path.display())));
        }
        dataset_from_bytes(&bytes, split)
    }

    /// Rejects a dataset directory generated from a different configuration.
    pub fn check(&self, cfg: &ExperimentConfig) -> Result<()> {
        if self.data_hash != cfg.data_hash() {
            return Err(Error::Config(format!(
                "datasets were generated with data settings {} but the current config has {}",
                self.data_hash,
                cfg.data_hash()
            )));
        }
        Ok(())
    }
}

/// Draws one split. Decimated scenarios evolve noiselessly on the fine grid and add
/// observation noise after decimation.
pub fn generate_split(
    spec: &ModelSpec,
    init: &InitialState,
    noise: &NoiseSpec,
    count: usize,
    len: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    let model = spec.build()?;
    let cov = noise.covariances(model.m(), model.n());
    let k = spec.decimation();
    if k == 1 {
        return generate_dataset(&model, &cov, init, count, len, seed, split);
    }
    let coarse = match spec {
        ModelSpec::Lorenz { dtau, order, observation, observation_rotation_deg, .. } => ModelSpec::Lorenz {
            dtau: *dtau,
            order: *order,
            observation: *observation,
            observation_rotation_deg: *observation_rotation_deg,
            decimation: None,
        }
        .build()?,
        _ => unreachable!("only Lorenz models decimate"),
    };
    if count == 0 {
        return Err(Error::invalid("dataset must contain at least one trajectory"));
    }
    let trajectories = (0..count)
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            let x0 = init.sample(&coarse, &mut rng)?;
            simulate_decimated(&model, k, &cov.r, &x0, len, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories, split)
}

/// Generates every split at every noise point into `dir` and writes the manifest.
/// With `csv`, a long-format CSV copy is written next to each binary file.
pub fn generate(cfg: &ExperimentConfig, dir: &Path, csv: bool) -> Result<Manifest> {
    cfg.validate()?;
    let (data_model, filter_model) = cfg.models()?;
    let mut datasets = Vec::new();
    for (noise_index, noise) in cfg.noise.points().iter().enumerate() {
        let mut jobs = vec![(Split::Train, 0, cfg.splits.train), (Split::Validation, 0, cfg.splits.validation)];
        jobs.extend(cfg.splits.test.iter().enumerate().map(|(i, s)| (Split::Test, i, *s)));
        for (split, test_index, spec) in jobs {
            let tag = format!("{}-{test_index}", split.as_str());
            let seed = derive_seed(cfg.seeds.data, &tag, noise_index as u64);
            let data = generate_split(&cfg.data_model, &cfg.initial_state, noise, spec.count, spec.len, seed, split)?;
            let file = format!("data/{}-{noise_index}-{test_index}.lkd", split.as_str());
            let sha256 = save_dataset(&dir.join(&file), &data)?;
            if csv {
                write_atomic(&dir.join(file.replace(".lkd", ".csv")), &dataset_to_csv(&data)?)?;
            }
            datasets.push(DatasetEntry {
                split,
                noise_index,
                test_index,
                inv_r2_db: cfg.noise.inv_r2_db[noise_index],
                seed,
                count: spec.count,
                len: spec.len,
                file,
                sha256,
            });
        }
    }
    let manifest = Manifest {
        scenario: cfg.scenario.clone(),
        config_hash: cfg.hash(),
        data_hash: cfg.data_hash(),
        data_fingerprint: data_model.fingerprint(),
        filter_fingerprint: filter_model.fingerprint(),
        datasets,
    };
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::config::builtin;

    fn small() -> ExperimentConfig {
        let mut cfg = builtin("empty").unwrap();
        cfg.noise.inv_r2_db = vec![0.0, 10.0];
        cfg
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let cfg = small();
        let data = generate_split(&cfg.data_model, &cfg.initial_state, &cfg.noise.points()[0], 3, 7, 9, Split::Test).unwrap();
        let back = dataset_from_bytes(&dataset_to_bytes(&data), Split::Test).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = small();
        let data = generate_split(&cfg.data_model, &cfg.initial_state, &cfg.noise.points()[0], 2, 4, 1, Split::Train).unwrap();
        let bytes = dataset_to_bytes(&data);
        assert!(matches!(dataset_from_bytes(&bytes[..bytes.len() - 3], Split::Train), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(dataset_from_bytes(&bad, Split::Train), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(dataset_from_bytes(&long, Split::Train), Err(Error::Format(_))));
    }

    #[test]
    fn generation_is_deterministic_and_checked() {
        let cfg = small();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate(&cfg, a.path(), true).unwrap();
        let mb = generate(&cfg, b.path(), false).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.datasets.len(), 2 * 3);
        assert_eq!(ma.data_fingerprint, ma.filter_fingerprint);
        let back = Manifest::load(a.path()).unwrap();
        assert_eq!(back, ma);
        let test = back.load_split(a.path(), Split::Test, 1, 0).unwrap();
        assert_eq!(test.len(), cfg.splits.test[0].count);
        assert!(a.path().join("data/test-1-0.csv").exists());
        back.check(&cfg).unwrap();
        let mut other = cfg.clone();
        other.training.steps += 1;
        back.check(&other).unwrap();
        other.seeds.data += 1;
        assert!(matches!(back.check(&other), Err(Error::Config(_))));
        std::fs::write(a.path().join("data/train-0-0.lkd"), b"junk").unwrap();
        assert!(back.load_split(a.path(), Split::Train, 0, 0).is_err());
        assert!(matches!(Manifest::load(&a.path().join("missing")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn decimated_split_has_no_process_noise() {
        let spec = ModelSpec::Lorenz {
            dtau: 0.02,
            order: 5,
            observation: crate::bench::config::LorenzObservation::Identity,
            observation_rotation_deg: 0.0,
            decimation: Some(20),
        };
        let noise = NoiseSpec { q2: 1.0, r2: 0.0 };
        let init = InitialState::Fixed { value: vec![1.0, 1.0, 1.0] };
        let data = generate_split(&spec, &init, &noise, 1, 5, 3, Split::Test).unwrap();
        let fine = spec.build().unwrap();
        let mut x = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        for t in 0..5 {
            for _ in 0..20 {
                x = fine.f(&x);
            }
            assert_eq!(data.trajectories[0].states.column(t).into_owned(), x);
        }
    }
}
