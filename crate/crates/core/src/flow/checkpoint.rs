//! Checkpoints: a JSON manifest plus a raw little-endian f32 blob.
//!
//! `model.json` names the blob (`model.bin` next to it), the network config,
//! every tensor's shape and byte offset, and optional training metadata.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FlowModelParams, FlowNetConfig, ParamLayout};
use crate::error::{Error, Result};
use crate::store::NormStats;

const FORMAT: &str = "ldb-flow-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub seed: Option<u64>,
    /// Stats sidecar, relative to the manifest directory.
    pub stats: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: FlowNetConfig,
    blob: String,
    dtype: String,
    tensors: Vec<TensorEntry>,
    training: CheckpointMeta,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(
    params: &FlowModelParams,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let layout = params.layout();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: *params.config(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        dtype: "f32-le".into(),
        tensors: layout
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                byte_offset: 4 * t.offset as u64,
                byte_len: 4 * t.len() as u64,
            })
            .collect(),
        training: meta.clone(),
    };
    let mut bytes = Vec::with_capacity(params.len() * 4);
    for v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(FlowModelParams, CheckpointMeta)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if manifest.format != FORMAT || manifest.version != VERSION || manifest.dtype != "f32-le" {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint {} v{} ({})",
            path.display(),
            manifest.format,
            manifest.version,
            manifest.dtype
        )));
    }
    manifest.config.validate()?;
    let layout = ParamLayout::new(&manifest.config);
    let consistent = layout.tensors().len() == manifest.tensors.len()
        && layout.tensors().iter().zip(&manifest.tensors).all(|(a, b)| {
            a.name == b.name
                && a.shape == b.shape
                && b.byte_offset == 4 * a.offset as u64
                && b.byte_len == 4 * a.len() as u64
        });
    if !consistent {
        return Err(Error::Format(format!(
            "{}: tensor table does not match the declared config",
            path.display()
        )));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = std::fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let expected = 4 * layout.total() as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len() as u64,
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let params = FlowModelParams::from_values(manifest.config, values)?;
    Ok((params, manifest.training))
}

/// Loads the stats sidecar a checkpoint refers to.
pub fn load_checkpoint_stats(manifest: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<NormStats> {
    let manifest = manifest.as_ref();
    let rel = meta.stats.as_deref().ok_or_else(|| {
        Error::Config(format!("{} does not reference a stats file", manifest.display()))
    })?;
    NormStats::load(manifest.with_file_name(rel))
}
