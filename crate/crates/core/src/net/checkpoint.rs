//! Checkpoint file layout (little-endian):
//!
//! ```text
//! "DASN" | u32 version | u64 header length | JSON header | f32 payload
//! ```
//!
//! The header holds the model config, epoch, metric history and the layer
//! manifests; the payload is every parameter in manifest order followed by
//! the batch-norm running statistics in stats-manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig, NetError, Result, TensorEntry};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DASN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Metrics recorded at the end of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    history: Vec<EpochMetrics>,
    manifest: Vec<TensorEntry>,
    stats_manifest: Vec<TensorEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes `model` (stored as f32) with its training history; returns the file size.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, epoch: usize, history: &[EpochMetrics], path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        epoch,
        history: history.to_vec(),
        manifest: model.manifest().to_vec(),
        stats_manifest: model.stats_manifest().to_vec(),
    })
    .map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let values = model.params().iter().chain(model.running_stats());
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * (model.param_count() + model.running_stats().len()));
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in values {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut f = std::fs::File::create(path).map_err(io(path))?;
    f.write_all(&buf).map_err(io(path))?;
    Ok(buf.len() as u64)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io(path))?;
    let bad = |m: String| NetError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 {
        return Err(bad(format!("file too short ({} bytes)", bytes.len())));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(format!("bad header: {e}")))?;

    let mut model = build_model::<T>(&header.config)?;
    if header.manifest != model.manifest() || header.stats_manifest != model.stats_manifest() {
        return Err(NetError::ConfigMismatch("layer manifest does not match the config's architecture".into()));
    }
    let (np, ns) = (model.param_count(), model.running_stats().len());
    let payload = &bytes[header_end..];
    if payload.len() != 4 * (np + ns) {
        return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), 4 * (np + ns))));
    }
    let mut vals = payload.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64));
    model.params_mut().iter_mut().for_each(|p| *p = vals.next().unwrap());
    model.running_stats_mut().iter_mut().for_each(|p| *p = vals.next().unwrap());
    Ok(Checkpoint {
        model,
        epoch: header.epoch,
        history: header.history,
    })
}

/// Loads a checkpoint and checks that its architecture matches `expected`.
pub fn load_checkpoint_expecting<T: Scalar>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint<T>> {
    let ck = load_checkpoint::<T>(path)?;
    if !ck.model.config().same_architecture(expected) {
        return Err(NetError::ConfigMismatch(format!(
            "checkpoint has {:?}, expected {:?}",
            ck.model.config(),
            expected
        )));
    }
    Ok(ck)
}
