//! `SDDCKPT1` checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SDDCKPT1"
//! u32 tensor count, then per tensor: u32 rows, u32 cols, f64 values row-major
//! u32 tensor count, then the EMA shadow tensors in the same form
//! u32 byte length, then UTF-8 JSON metadata (model kind, architecture, ...)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::ScaleSpec;
use crate::denoiser::{Architecture, DenoiserParams, ModelKind};
use crate::error::{Result, SddError};
use crate::io::{dim_u32, push_matrix_le, write_atomic, ByteReader};
use crate::numerics::Matrix;
use crate::schedule::NoiseSchedule;
use crate::trainer::{TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDDCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelKind,
    pub d: usize,
    pub arch: Architecture,
    pub schedule: NoiseSchedule,
    pub scale: ScaleSpec,
    pub step: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, d: usize) -> Self {
        let cfg = trainer.config().clone();
        Checkpoint {
            params: trainer.params.clone(),
            ema: trainer.ema.clone(),
            meta: CheckpointMeta {
                model: cfg.model,
                d,
                arch: trainer.params.arch().clone(),
                schedule: cfg.schedule,
                scale: trainer.scale().clone(),
                step: trainer.step(),
                config: cfg,
            },
        }
    }

    /// Weights used for sampling: the EMA shadow or the raw parameters.
    pub fn weights(&self, use_ema: bool) -> &DenoiserParams {
        if use_ema {
            &self.ema
        } else {
            &self.params
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for set in [&self.params, &self.ema] {
            out.extend_from_slice(&dim_u32(set.tensors().len())?.to_le_bytes());
            for t in set.tensors() {
                push_matrix_le(&mut out, t)?;
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&dim_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            let msg = if magic.starts_with(b"SDDCKPT") {
                format!("unsupported checkpoint version {:?}", magic[7] as char)
            } else {
                "not an SDDCKPT checkpoint".to_string()
            };
            return Err(SddError::format(0, msg));
        }
        let params = read_tensors(&mut r, "parameter")?;
        let ema = read_tensors(&mut r, "EMA")?;
        let len = r.u32_le("metadata length")? as usize;
        let meta_at = r.offset();
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len, "metadata")?)
            .map_err(|e| SddError::format(meta_at, format!("bad metadata: {e}")))?;
        r.finish("checkpoint")?;

        if meta.arch.channels != meta.model.channels(meta.d) {
            return Err(SddError::format(meta_at, "metadata architecture disagrees with model kind"));
        }
        let wrap = |tensors| {
            DenoiserParams::from_tensors(meta.arch.clone(), tensors)
                .map_err(|e| SddError::format(meta_at, format!("tensors do not match metadata: {e}")))
        };
        let params = wrap(params)?;
        let ema = wrap(ema)?;
        Ok(Checkpoint { params, ema, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_tensors(r: &mut ByteReader<'_>, what: &str) -> Result<Vec<Matrix>> {
    let count = r.u32_le(&format!("{what} tensor count"))? as usize;
    // Each tensor needs at least its 8-byte header.
    if count > r.remaining() / 8 {
        return Err(SddError::format(r.offset(), format!("implausible {what} tensor count {count}")));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let rows = r.u32_le("tensor rows")? as usize;
        let cols = r.u32_le("tensor cols")? as usize;
        out.push(r.matrix_le(rows, cols, &format!("{what} tensor {i}"))?);
    }
    Ok(out)
}
