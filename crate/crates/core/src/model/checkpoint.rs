//! Checkpoint files.
//!
//! A checkpoint is a binary weight blob plus a JSON sidecar next to it
//! (`<blob>.json`). Blob layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "RSEGCKPT"
//! version u32      CHECKPOINT_VERSION
//! width   u8       bytes per value (4 = f32, 8 = f64)
//! count   u32      number of parameter tensors
//! repeat count times:
//!   len   u64      number of values
//!   data  len × width bytes
//! ```
//!
//! The sidecar carries the model spec, training-config hash, epoch, dtype and
//! the SHA-256 of the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "roughseg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RSEGCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub spec: ModelSpec,
    pub training_config_hash: String,
    pub epoch: usize,
    pub param_count: usize,
    pub blob_sha256: String,
}

/// Trained weights together with the spec that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    pub training_config_hash: String,
    pub epoch: usize,
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl<S: Scalar> Checkpoint<S> {
    pub fn encode_weights(model: &Model<S>) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + model.param_count() * S::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(S::BYTES as u8);
        out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
        for p in model.params() {
            out.extend_from_slice(&(p.len() as u64).to_le_bytes());
            for &v in p {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn decode_weights(bytes: &[u8]) -> Result<Vec<Vec<S>>> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated weight blob"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(bad("not a roughseg weight blob"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported blob version {version}"
            )));
        }
        let width = take(1)?[0] as usize;
        if width != S::BYTES {
            return Err(Error::Checkpoint(format!(
                "blob stores {width}-byte values, expected {} ({})",
                S::BYTES,
                S::DTYPE
            )));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
            let raw = take(len.checked_mul(width).ok_or_else(|| bad("length overflow"))?)?;
            params.push(raw.chunks_exact(width).map(S::read_le).collect());
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes after weight blob"));
        }
        Ok(params)
    }

    pub fn meta(&self) -> CheckpointMeta {
        let blob = Self::encode_weights(&self.model);
        CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: S::DTYPE.into(),
            spec: self.model.spec().clone(),
            training_config_hash: self.training_config_hash.clone(),
            epoch: self.epoch,
            param_count: self.model.param_count(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
        }
    }

    /// Writes `path` (blob) and `path.json` (sidecar), each atomically.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let blob = Self::encode_weights(&self.model);
        let meta = self.meta();
        write_atomic(path, &blob)?;
        let json = serde_json::to_vec_pretty(&meta).map_err(|source| Error::Json {
            path: sidecar_path(path),
            source,
        })?;
        write_atomic(&sidecar_path(path), &json)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let meta_bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes).map_err(|source| Error::Json {
            path: side.clone(),
            source,
        })?;
        if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format {} v{}",
                side.display(),
                meta.format,
                meta.version
            )));
        }
        if meta.dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint dtype {} cannot be loaded as {}",
                meta.dtype,
                S::DTYPE
            )));
        }
        let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest = hex::encode(Sha256::digest(&blob));
        if digest != meta.blob_sha256 {
            return Err(Error::Checkpoint(format!(
                "{}: blob hash {digest} does not match sidecar {}",
                path.display(),
                meta.blob_sha256
            )));
        }
        let params = Self::decode_weights(&blob)?;
        let mut model = build::<S>(&meta.spec)?;
        if model.param_count() != meta.param_count {
            return Err(Error::Checkpoint(format!(
                "spec describes {} parameters, sidecar records {}",
                model.param_count(),
                meta.param_count
            )));
        }
        model.set_params(params)?;
        Ok(Self {
            model,
            training_config_hash: meta.training_config_hash,
            epoch: meta.epoch,
        })
    }
}
