//! Flat little-endian `f64` parameter dump plus a JSON shape manifest.

use super::model::ModelParams;
use super::{HarnessError, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FORMAT: &str = "gridmoe-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values, not bytes.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub total_values: usize,
    pub entries: Vec<CheckpointEntry>,
    /// Resolved run configuration the parameters belong to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
}

/// Sidecar path for a checkpoint binary: same stem, `.json` extension.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn save(params: &ModelParams, bin: &Path, config: Option<&str>) -> Result<CheckpointManifest> {
    let mut bytes = Vec::with_capacity(params.n_values() * 8);
    let mut entries = Vec::new();
    let mut offset = 0;
    for (info, t) in params.infos().into_iter().zip(params.tensors()) {
        entries.push(CheckpointEntry {
            name: info.name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        total_values: offset,
        entries,
        config: config.map(str::to_string),
    };
    fs::write(bin, bytes)?;
    fs::write(
        sidecar_path(bin),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

pub fn read_manifest(bin: &Path) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(sidecar_path(bin))?;
    let m: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Checkpoint(format!("unreadable manifest: {e}")))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(HarnessError::Checkpoint(format!(
            "unsupported format {:?}",
            m.format
        )));
    }
    Ok(m)
}

/// Overwrites `params` with the stored values; names and shapes must match.
pub fn load_into(bin: &Path, params: &mut ModelParams) -> Result<CheckpointManifest> {
    let manifest = read_manifest(bin)?;
    let bytes = fs::read(bin)?;
    if bytes.len() != manifest.total_values * 8 {
        return Err(HarnessError::Checkpoint(format!(
            "binary holds {} bytes, manifest declares {} values",
            bytes.len(),
            manifest.total_values
        )));
    }
    let infos = params.infos();
    if infos.len() != manifest.entries.len() {
        return Err(HarnessError::ShapeMismatch(format!(
            "checkpoint has {} tensors, model has {}",
            manifest.entries.len(),
            infos.len()
        )));
    }
    for ((info, t), e) in infos
        .iter()
        .zip(params.tensors_mut())
        .zip(&manifest.entries)
    {
        if info.name != e.name || t.shape() != e.shape.as_slice() {
            return Err(HarnessError::ShapeMismatch(format!(
                "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                e.name,
                e.shape,
                info.name,
                t.shape()
            )));
        }
        let end = e.offset + t.len();
        if end > manifest.total_values {
            return Err(HarnessError::Checkpoint(format!(
                "tensor {} overruns the binary",
                e.name
            )));
        }
        for (dst, chunk) in t
            .data_mut()
            .iter_mut()
            .zip(bytes[e.offset * 8..end * 8].chunks_exact(8))
        {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(manifest)
}
