//! Checkpoint archive.
//!
//! ```text
//! HCA-CKPT 1\n
//! u64 LE header length
//! JSON header (config, progress, rng state, tensor index)
//! f64 LE payload: parameters, then optimizer squared averages
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HcaError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &str = "HCA-CKPT 1";

/// Full training state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub best_val_dtt: Option<f64>,
    pub best_epoch: Option<usize>,
    pub params: ParamStore,
    /// RMSprop running averages, one per parameter tensor.
    pub sq_avg: Vec<Tensor>,
    pub alpha: f64,
    pub alpha_sq: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    rng: ChaCha8Rng,
    best_val_dtt: Option<f64>,
    best_epoch: Option<usize>,
    alpha: f64,
    alpha_sq: f64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            best_val_dtt: self.best_val_dtt,
            best_epoch: self.best_epoch,
            alpha: self.alpha,
            alpha_sq: self.alpha_sq,
            tensors: self
                .params
                .iter()
                .map(|(_, name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.iter().map(|(_, _, t)| t).chain(&self.sq_avg) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| HcaError::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| HcaError::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| HcaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| HcaError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            HcaError::Ingestion { message, .. } => HcaError::ingest(path, message),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mismatch = |stored: String| HcaError::VersionMismatch {
            stored,
            expected: MAGIC.to_string(),
        };
        let nl = bytes
            .iter()
            .take(64)
            .position(|&b| b == b'\n')
            .ok_or_else(|| mismatch("<no header line>".into()))?;
        let first = String::from_utf8_lossy(&bytes[..nl]).into_owned();
        if first != MAGIC {
            return Err(mismatch(first));
        }
        let rest = &bytes[nl + 1..];
        if rest.len() < 8 {
            return Err(mismatch(format!("{first} (truncated header)")));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let json = rest
            .get(8..8usize.saturating_add(len))
            .ok_or_else(|| mismatch(format!("{first} (truncated header)")))?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| mismatch(format!("{first} (unreadable header: {e})")))?;
        let payload = &rest[8 + len..];
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != 2 * total * 8 {
            return Err(HcaError::ingest(
                "",
                format!(
                    "payload holds {} bytes, header describes {}",
                    payload.len(),
                    2 * total * 8
                ),
            ));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, values.by_ref().take(n).collect())
        };
        let mut params = ParamStore::new();
        for e in &header.tensors {
            params.add(e.name.clone(), take(&e.shape)?);
        }
        let sq_avg = header
            .tensors
            .iter()
            .map(|e| take(&e.shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            best_val_dtt: header.best_val_dtt,
            best_epoch: header.best_epoch,
            params,
            sq_avg,
            alpha: header.alpha,
            alpha_sq: header.alpha_sq,
        })
    }
}
