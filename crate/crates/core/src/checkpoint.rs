//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DRFCKPT\0"
//! version  u32
//! meta_len u64, then meta_len bytes of JSON metadata
//! count    u64, then count f64 values (parameter blob)
//! ```
//!
//! The metadata carries the model and render configs, the min-max PAV
//! statistics, training metadata and an index of `(name, shape, offset)`
//! into the blob. Parameter values are stored as raw bits, so a round trip
//! is exact.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Drf, ModelConfig, ModelError};
use crate::pav::MinMaxStats;
use crate::skeleton_map::RenderConfig;
use crate::tensor::{ParamStore, Tensor};
use crate::training::EpochLog;

pub const MAGIC: &[u8; 8] = b"DRFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated: {0}")]
    Truncated(&'static str),
    #[error("checkpoint metadata is invalid: {0}")]
    Metadata(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub log: Vec<EpochLog>,
}

/// Everything inference needs, with no external config.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Drf,
    pub stats: MinMaxStats,
    pub render: RenderConfig,
    /// Confidence threshold for normalization and the PAV.
    pub c_min: f64,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    canvas: (usize, usize),
    render: RenderConfig,
    stats: MinMaxStats,
    c_min: f64,
    training: TrainingMeta,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut params = Vec::new();
        let mut blob: Vec<f64> = Vec::new();
        for (_, p) in self.model.params().iter() {
            params.push(ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: blob.len(),
            });
            blob.extend_from_slice(p.value.data());
        }
        let meta = Metadata {
            model: self.model.config().clone(),
            canvas: self.model.canvas(),
            render: self.render.clone(),
            stats: self.stats.clone(),
            c_min: self.c_min,
            training: self.meta.clone(),
            params,
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(8 + 4 + 16 + json.len() + 8 * blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        take(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut v = [0u8; 4];
        take(&mut r, &mut v, "version")?;
        let found = u32::from_le_bytes(v);
        if found != VERSION {
            return Err(CheckpointError::Version {
                found,
                expected: VERSION,
            });
        }
        let meta_len = read_u64(&mut r, "metadata length")?;
        if (r.len() as u64) < meta_len {
            return Err(CheckpointError::Truncated("metadata"));
        }
        let (json, rest) = r.split_at(meta_len as usize);
        r = rest;
        let meta: Metadata =
            serde_json::from_slice(json).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let count = read_u64(&mut r, "parameter count")?;
        if (r.len() as u64) < count.saturating_mul(8) {
            return Err(CheckpointError::Truncated("parameter blob"));
        }
        if r.len() as u64 != count * 8 {
            return Err(CheckpointError::Metadata("trailing bytes after parameter blob".into()));
        }
        let blob: Vec<f64> = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut store = ParamStore::new();
        for e in meta.params {
            let n: usize = e.shape.iter().product();
            let data = blob
                .get(e.offset..e.offset + n)
                .ok_or_else(|| CheckpointError::Metadata(format!("parameter `{}` lies outside the blob", e.name)))?;
            let t = Tensor::new(e.shape, data.to_vec()).map_err(|err| CheckpointError::Metadata(err.to_string()))?;
            store
                .insert(e.name, t)
                .map_err(|err| CheckpointError::Metadata(err.to_string()))?;
        }
        let model = Drf::from_params(meta.model, meta.canvas, store)?;
        Ok(Self {
            model,
            stats: meta.stats,
            render: meta.render,
            c_min: meta.c_min,
            meta: meta.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| CheckpointError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }
}

fn take(r: &mut &[u8], buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
    if r.len() < buf.len() {
        return Err(CheckpointError::Truncated(what));
    }
    let (head, rest) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = rest;
    Ok(())
}

fn read_u64(r: &mut &[u8], what: &'static str) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    take(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}
