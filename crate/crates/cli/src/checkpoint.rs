//! Checkpoint files.
//!
//! Layout: `HVCK`, u32 LE format version, u64 LE header length, the JSON
//! header, the SHA-256 of the header bytes, then the payload of f64 LE
//! values in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use hvae_core::hvae::{EpochStats, HvaeConfig, HvaeError, HvaeParams, ParamSpec, Trainer};
use hvae_core::numerics::{RngState, SeededRng, Tensor};

use crate::config::{ResolvedAllocation, TrainSpec};

pub const MAGIC: &[u8; 4] = b"HVCK";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("header checksum mismatch")]
    HeaderChecksum,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload length mismatch: header declares {expected} bytes, file has {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("payload checksum mismatch")]
    PayloadChecksum,
    #[error("manifest does not cover the payload: {0}")]
    Manifest(String),
    #[error("checkpoint does not match the model: {0}")]
    Model(#[from] HvaeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: HvaeConfig,
    pub train: TrainSpec,
    pub allocation: Option<ResolvedAllocation>,
    /// Parameters, then Adam first and second moments.
    pub manifest: Vec<ParamSpec>,
    pub rng: RngState,
    pub epoch: usize,
    pub adam_step: u64,
    pub history: Vec<EpochStats>,
    /// Number of f64 values in the payload.
    pub payload_len: usize,
    pub payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn payload_bytes(tensors: &[Tensor]) -> Vec<u8> {
    tensors.iter().flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())).collect()
}

/// SHA-256 of a whole file, used in report provenance.
pub fn file_sha256(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Ok(sha256_hex(&bytes))
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, rng: &SeededRng, train: &TrainSpec, allocation: Option<ResolvedAllocation>) -> Self {
        let params = &trainer.params;
        let mut manifest = params.manifest();
        for prefix in ["adam.m", "adam.v"] {
            manifest.extend(params.manifest().into_iter().map(|s| ParamSpec { name: format!("{prefix}.{}", s.name), shape: s.shape }));
        }
        let tensors: Vec<Tensor> = params.tensors().iter().chain(&trainer.m).chain(&trainer.v).cloned().collect();
        let header = Header {
            model: params.config().clone(),
            train: train.clone(),
            allocation,
            manifest,
            rng: rng.state(),
            epoch: trainer.epoch,
            adam_step: trainer.step,
            history: trainer.history.clone(),
            payload_len: tensors.iter().map(Tensor::len).sum(),
            payload_sha256: sha256_hex(&payload_bytes(&tensors)),
        };
        Checkpoint { header, tensors }
    }

    fn split(&self) -> (usize, &[Tensor]) {
        (self.tensors.len() / 3, &self.tensors)
    }

    pub fn params(&self) -> Result<HvaeParams, CheckpointError> {
        let (n, ts) = self.split();
        Ok(HvaeParams::from_tensors(&self.header.model, ts[..n].to_vec())?)
    }

    /// Optimizer state and RNG for resuming training.
    pub fn trainer(&self) -> Result<(Trainer, SeededRng), CheckpointError> {
        let (n, ts) = self.split();
        let mut trainer = Trainer::new(self.params()?);
        trainer.m = ts[n..2 * n].to_vec();
        trainer.v = ts[2 * n..].to_vec();
        trainer.step = self.header.adam_step;
        trainer.epoch = self.header.epoch;
        trainer.history = self.header.history.clone();
        let rng = SeededRng::from_state(&self.header.rng)
            .ok_or_else(|| CheckpointError::Header(format!("unknown rng algorithm `{}`", self.header.rng.algorithm)))?;
        Ok((trainer, rng))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = payload_bytes(&self.tensors);
        let mut header = self.header.clone();
        header.payload_len = payload.len() / 8;
        header.payload_sha256 = sha256_hex(&payload);
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + hjson.len() + 32 + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&Sha256::digest(&hjson));
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < PREFIX {
            return Err(CheckpointError::TruncatedHeader);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let hend = usize::try_from(hlen).ok().and_then(|h| h.checked_add(PREFIX)).ok_or(CheckpointError::TruncatedHeader)?;
        if bytes.len() < hend + 32 {
            return Err(CheckpointError::TruncatedHeader);
        }
        let hjson = &bytes[PREFIX..hend];
        if Sha256::digest(hjson).as_slice() != &bytes[hend..hend + 32] {
            return Err(CheckpointError::HeaderChecksum);
        }
        let header: Header = serde_json::from_slice(hjson).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[hend + 32..];
        let expected = header.payload_len * 8;
        if payload.len() != expected {
            return Err(CheckpointError::PayloadLength { expected, found: payload.len() });
        }
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(CheckpointError::PayloadChecksum);
        }
        let total: usize = header.manifest.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        if total != header.payload_len || !header.manifest.len().is_multiple_of(3) {
            return Err(CheckpointError::Manifest(format!("{} values declared, {} in manifest", header.payload_len, total)));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let tensors = header
            .manifest
            .iter()
            .map(|s| {
                let n = s.shape.iter().product();
                Tensor::new(&s.shape, values.by_ref().take(n).collect()).map_err(|e| CheckpointError::Manifest(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let ckpt = Checkpoint { header, tensors };
        ckpt.params()?;
        Ok(ckpt)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.to_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}
