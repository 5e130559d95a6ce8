//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "LKFCKPT\0"
//! version  u32 LE
//! header   u32 LE length, then UTF-8 JSON (CheckpointHeader)
//! count    u32 LE number of tensors
//! tensor   u32 LE name length, name, u32 LE rows, u32 LE cols,
//!          rows * cols f64 LE values in column-major order
//! ```

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::GRU_CONVENTION;
use super::nets::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::fsutil::{read_artifact, write_atomic};

pub const MAGIC: &[u8; 8] = b"LKFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkSpec,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub gru_convention: String,
    /// Free-form training metadata.
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, DMatrix<f64>)>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, meta: serde_json::Value) -> Self {
        let header = CheckpointHeader {
            network: *net.spec(),
            m: net.m(),
            n: net.n(),
            seed: net.seed(),
            gru_convention: GRU_CONVENTION.to_string(),
            meta,
        };
        let tensors = net.params().iter().map(|(name, v)| (name.to_string(), v.clone())).collect();
        Self { header, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Rebuilds the network and loads its parameters by name.
    pub fn network(&self) -> Result<Network> {
        if self.header.gru_convention != GRU_CONVENTION {
            return Err(Error::Format(format!("unsupported GRU convention {}", self.header.gru_convention)));
        }
        let mut net = Network::new(self.header.network, self.header.m, self.header.n, self.header.seed)?;
        let names: Vec<String> = net.params().names().to_vec();
        for (name, value) in names.iter().zip(net.params_mut().values_mut()) {
            let stored = self.tensor(name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if stored.shape() != value.shape() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}", stored.shape())));
            }
            value.copy_from(stored);
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, value) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
            for v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name".into()))?;
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let raw = r.take(rows * cols * 8)?;
            let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, DMatrix::from_vec(rows, cols, data)));
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_artifact(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(len).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
