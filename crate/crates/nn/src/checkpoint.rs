//! Checkpoints: `<stem>.json` manifest plus `<stem>.bin`, the parameters as
//! little-endian f64 concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub params: Vec<ParamEntry>,
    /// Architecture, hyperparameters, RNG state: whatever the owner needs to
    /// rebuild the model.
    pub meta: serde_json::Value,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

pub fn save(dir: &Path, stem: &str, params: &ParamSet, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        params: params
            .names()
            .iter()
            .zip(params.values())
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape(),
            })
            .collect(),
        meta,
    };
    let mut blob = Vec::with_capacity(params.total_size() * 8);
    for t in params.values() {
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let (mp, bp) = paths(dir, stem);
    // blob first so a manifest never points at a missing or stale blob
    fs::write(&bp, blob)?;
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path, stem: &str) -> Result<(ParamSet, serde_json::Value)> {
    let (mp, bp) = paths(dir, stem);
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(mp)?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let bytes = fs::read(bp)?;
    let total: usize = manifest.params.iter().map(|e| e.shape[0] * e.shape[1]).sum();
    if bytes.len() != total * 8 {
        return Err(NnError::Checkpoint(format!(
            "blob holds {} bytes, manifest declares {} values",
            bytes.len(),
            total
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut ps = ParamSet::new();
    for e in &manifest.params {
        let n = e.shape[0] * e.shape[1];
        let data: Vec<f64> = values.by_ref().take(n).collect();
        ps.add(e.name.clone(), Tensor::new(e.shape[0], e.shape[1], data));
    }
    Ok((ps, manifest.meta))
}

/// Copies values from `src` into `dst`, requiring identical names and shapes.
pub fn restore_into(dst: &mut ParamSet, src: &ParamSet) -> Result<()> {
    if dst.len() != src.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            src.len(),
            dst.len()
        )));
    }
    for id in src.ids() {
        if dst.name(id) != src.name(id) || dst.get(id).shape() != src.get(id).shape() {
            return Err(NnError::Checkpoint(format!(
                "parameter {} mismatch: checkpoint `{}` {:?}, model `{}` {:?}",
                id.0,
                src.name(id),
                src.get(id).shape(),
                dst.name(id),
                dst.get(id).shape()
            )));
        }
    }
    for id in src.ids() {
        *dst.get_mut(id) = src.get(id).clone();
    }
    Ok(())
}
