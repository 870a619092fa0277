//! Binary checkpoints with a JSON manifest.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a
//! little-endian u64 manifest length, the JSON manifest, every parameter as
//! little-endian f32 in manifest order, and optionally the optimizer state
//! (step count, then first and second moments per parameter). Training runs
//! in f32, so save followed by load reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AdamW, OptimState, Params, Shape, Tensor};
use crate::tone::{Model, ModelConfig};
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PYRTONE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    step: u64,
    params: Vec<ParamEntry>,
    has_optim: bool,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 4],
    /// Element offset into the payload.
    offset: usize,
}

/// Optimizer state carried alongside the parameters.
pub struct OptimSnapshot {
    pub step: u64,
    pub moments: Vec<OptimState<f32>>,
}

/// A decoded checkpoint: training config, step counter, named parameter
/// tensors in registration order, and optional optimizer state.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    entries: Vec<(String, Tensor<f32>)>,
    pub optim: Option<OptimSnapshot>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Snapshots the current parameters (and optionally optimizer moments).
    pub fn capture(
        config: &TrainConfig,
        step: u64,
        params: &Params<f32>,
        optim: Option<&AdamW<f32>>,
    ) -> Self {
        let entries = params.iter().map(|(_, name, v)| (name.to_string(), v.clone())).collect();
        let optim = optim.map(|opt| OptimSnapshot {
            step: opt.steps(),
            moments: opt.state().to_vec(),
        });
        Checkpoint { config: config.clone(), step, entries, optim }
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    /// Serializes to the binary layout described in the module docs.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0usize;
        let manifest = Manifest {
            config: self.config.clone(),
            step: self.step,
            params: self
                .entries
                .iter()
                .map(|(name, t)| {
                    let s = t.shape();
                    let entry = ParamEntry { name: name.clone(), shape: [s.n, s.c, s.h, s.w], offset };
                    offset += t.shape().numel();
                    entry
                })
                .collect(),
            has_optim: self.optim.is_some(),
        };
        let manifest_bytes =
            serde_json::to_vec(&manifest).map_err(|e| corrupt(format!("cannot encode manifest: {e}")))?;

        let mut out = Vec::with_capacity(24 + manifest_bytes.len() + 4 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(optim) = &self.optim {
            out.extend_from_slice(&optim.step.to_le_bytes());
            for buf in optim.moments.iter().flat_map(|s| [&s.m, &s.v]) {
                for v in buf.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Decodes and fully validates a checkpoint byte stream.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(corrupt("file too short to hold a checkpoint header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic; not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!(
                "checkpoint version {version} is not supported; this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < manifest_len {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..manifest_len])
            .map_err(|e| corrupt(format!("corrupt manifest: {e}")))?;

        let mut total = 0usize;
        for entry in &manifest.params {
            if entry.offset != total {
                return Err(corrupt(format!(
                    "manifest offset for {} is {}, expected {total}",
                    entry.name, entry.offset
                )));
            }
            let [n, c, h, w] = entry.shape;
            total += n * c * h * w;
        }
        let payload = &body[manifest_len..];
        let expected = if manifest.has_optim { 4 * total + 8 + 8 * total } else { 4 * total };
        if payload.len() != expected {
            return Err(corrupt(format!(
                "truncated or oversized payload: {} bytes, manifest implies {expected}",
                payload.len()
            )));
        }

        let read_block = |at: usize, numel: usize| -> Vec<f32> {
            payload[at..at + 4 * numel]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        };
        let mut entries = Vec::with_capacity(manifest.params.len());
        for entry in &manifest.params {
            let [n, c, h, w] = entry.shape;
            let t = Tensor::new(Shape::new(n, c, h, w), read_block(4 * entry.offset, n * c * h * w))?;
            entries.push((entry.name.clone(), t));
        }
        let optim = if manifest.has_optim {
            let base = 4 * total;
            let step = u64::from_le_bytes(payload[base..base + 8].try_into().unwrap());
            let mut at = base + 8;
            let mut moments = Vec::with_capacity(entries.len());
            for (_, t) in &entries {
                let m = Tensor::new(t.shape(), read_block(at, t.shape().numel()))?;
                at += 4 * t.shape().numel();
                let v = Tensor::new(t.shape(), read_block(at, t.shape().numel()))?;
                at += 4 * t.shape().numel();
                moments.push(OptimState { m, v });
            }
            Some(OptimSnapshot { step, moments })
        } else {
            None
        };
        Ok(Checkpoint { config: manifest.config, step: manifest.step, entries, optim })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks that this checkpoint fits a freshly registered model of the
    /// given architecture, naming the first mismatched parameter.
    pub fn validate_against(&self, config: ModelConfig) -> Result<()> {
        let (_, fresh) = Model::new::<f32>(config)?;
        if fresh.len() != self.entries.len() {
            return Err(corrupt(format!(
                "parameter count mismatch: checkpoint has {}, architecture registers {}",
                self.entries.len(),
                fresh.len()
            )));
        }
        for ((_, name, value), (ck_name, ck_value)) in fresh.iter().zip(&self.entries) {
            if name != ck_name {
                return Err(corrupt(format!(
                    "parameter order mismatch: checkpoint has {ck_name}, architecture expects {name}"
                )));
            }
            if value.shape() != ck_value.shape() {
                return Err(corrupt(format!(
                    "shape mismatch for parameter {name}: checkpoint has {}, architecture expects {}",
                    ck_value.shape(),
                    value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Copies the stored values into an already-registered parameter set.
    pub fn load_into(&self, params: &mut Params<f32>) -> Result<()> {
        if params.len() != self.entries.len() {
            return Err(corrupt(format!(
                "parameter count mismatch: checkpoint has {}, registry has {}",
                self.entries.len(),
                params.len()
            )));
        }
        for (name, value) in &self.entries {
            let id = params
                .find(name)
                .ok_or_else(|| corrupt(format!("checkpoint parameter {name} is not in the registry")))?;
            if params.value(id).shape() != value.shape() {
                return Err(corrupt(format!(
                    "shape mismatch for parameter {name}: checkpoint has {}, registry has {}",
                    value.shape(),
                    params.value(id).shape()
                )));
            }
            *params.value_mut(id) = value.clone();
        }
        Ok(())
    }
}
