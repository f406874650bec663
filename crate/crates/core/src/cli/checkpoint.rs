//! Model files: magic, length-prefixed JSON manifest, then the parameters
//! as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::diffcore::{ParamStore, Tensor};
use crate::trainer::{Model, TrainConfig, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"DEISI1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("corrupt manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint version {found} (this build reads version {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("trailing bytes after payload: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("checkpoint does not describe a valid model: {0}")]
    Model(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: TrainConfig,
    pub num_items: usize,
    /// Hex SHA-256 of the item ids, one per line, in index order.
    pub vocabulary_sha256: String,
    pub parameters: Vec<ParamEntry>,
}

impl Manifest {
    pub fn payload_len(&self) -> usize {
        self.parameters.iter().map(|p| p.shape[0] * p.shape[1] * 4).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
}

pub fn vocabulary_hash(vocab: &Vocabulary) -> String {
    let mut h = Sha256::new();
    for id in vocab.ids() {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(model: &Model, vocabulary_sha256: &str) -> Vec<u8> {
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        num_items: model.num_items,
        vocabulary_sha256: vocabulary_sha256.to_string(),
        parameters: model
            .params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: [t.rows(), t.cols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + manifest.payload_len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let rest = bytes.strip_prefix(CHECKPOINT_MAGIC.as_slice()).ok_or(CheckpointError::BadMagic)?;
    if rest.len() < 8 {
        return Err(CheckpointError::Manifest("missing manifest length".into()));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(CheckpointError::Manifest("manifest extends past end of file".into()));
    }
    let (json, payload) = rest.split_at(len);
    let header: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let version = header
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Manifest("missing version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(CheckpointError::UnsupportedVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
        });
    }
    let manifest: Manifest = serde_json::from_value(header).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let expected = manifest.payload_len();
    if payload.len() < expected {
        return Err(CheckpointError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(CheckpointError::TrailingBytes {
            expected,
            found: payload.len(),
        });
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))));
    let mut params = ParamStore::new();
    for p in &manifest.parameters {
        let [r, c] = p.shape;
        let data: Vec<f64> = values.by_ref().take(r * c).collect();
        let t = Tensor::matrix(r, c, data).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        params
            .register(p.name.clone(), t)
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    }
    let model = Model::from_params(&manifest.config, manifest.num_items, params)?;
    Ok(Checkpoint { manifest, model })
}

pub fn save_checkpoint(model: &Model, vocabulary_sha256: &str, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(model, vocabulary_sha256))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}
