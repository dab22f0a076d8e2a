//! Bit-exact model persistence: a magic tag, a JSON manifest, and one flat
//! little-endian f32 blob holding parameters followed by both Adam moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::model::VgnModel;
use crate::error::{Error, Result};
use crate::fsutil;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VGNCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub entries: Vec<CheckpointEntry>,
    pub param_count: usize,
    pub adam_m_byte_offset: usize,
    pub adam_v_byte_offset: usize,
    pub adam_step: u64,
    pub epochs_done: u32,
    pub grid_n: usize,
    pub config_hash: String,
}

fn expected_entries(model: &VgnModel<f32>) -> Vec<CheckpointEntry> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, layer) in model.layers() {
        entries.push(CheckpointEntry {
            name: format!("{name}.weight"),
            shape: vec![layer.out_c, layer.in_c, layer.k, layer.k, layer.k],
            byte_offset: offset,
        });
        offset += layer.weight.len() * 4;
        entries.push(CheckpointEntry {
            name: format!("{name}.bias"),
            shape: vec![layer.out_c],
            byte_offset: offset,
        });
        offset += layer.bias.len() * 4;
    }
    entries
}

pub fn save_checkpoint(
    path: &Path,
    model: &VgnModel<f32>,
    adam: &AdamState<f32>,
    epochs_done: u32,
    grid_n: usize,
    config_hash: &str,
) -> Result<()> {
    let param_count = model.param_count();
    if adam.m.len() != param_count || adam.v.len() != param_count {
        return Err(Error::ShapeMismatch {
            expected: vec![param_count],
            got: vec![adam.m.len(), adam.v.len()],
        });
    }
    let manifest = CheckpointManifest {
        entries: expected_entries(model),
        param_count,
        adam_m_byte_offset: param_count * 4,
        adam_v_byte_offset: param_count * 8,
        adam_step: adam.step,
        epochs_done,
        grid_n,
        config_hash: config_hash.to_string(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut bytes =
        Vec::with_capacity(12 + manifest_json.len() + param_count * 12);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    for (_, layer) in model.layers() {
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in adam.m.iter().chain(adam.v.iter()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fsutil::atomic_write_bytes(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(VgnModel<f32>, AdamState<f32>, CheckpointManifest)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad checkpoint magic"));
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let blob_start = 12 + manifest_len;
    if bytes.len() < blob_start {
        return Err(Error::format("checkpoint", "truncated manifest"));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..blob_start])
        .map_err(|e| Error::format("checkpoint", format!("manifest: {e}")))?;
    let mut model: VgnModel<f32> = VgnModel::new();
    if manifest.param_count != model.param_count() {
        return Err(Error::format(
            "checkpoint",
            format!(
                "parameter count {} does not match the architecture ({})",
                manifest.param_count,
                model.param_count()
            ),
        ));
    }
    if manifest.entries != expected_entries(&model) {
        return Err(Error::format(
            "checkpoint",
            "layer names, shapes, or offsets do not match the architecture",
        ));
    }
    let blob = &bytes[blob_start..];
    if blob.len() != manifest.param_count * 12 {
        return Err(Error::format(
            "checkpoint",
            format!(
                "blob holds {} bytes, expected {}",
                blob.len(),
                manifest.param_count * 12
            ),
        ));
    }
    let read_f32 = |at: usize| f32::from_le_bytes(blob[at..at + 4].try_into().unwrap());
    let mut offset = 0usize;
    for (_, layer) in model.layers_mut() {
        for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *v = read_f32(offset);
            offset += 4;
        }
    }
    let mut adam = AdamState::new(manifest.param_count);
    adam.step = manifest.adam_step;
    for (i, v) in adam.m.iter_mut().enumerate() {
        *v = read_f32(manifest.adam_m_byte_offset + i * 4);
    }
    for (i, v) in adam.v.iter_mut().enumerate() {
        *v = read_f32(manifest.adam_v_byte_offset + i * 4);
    }
    Ok((model, adam, manifest))
}
