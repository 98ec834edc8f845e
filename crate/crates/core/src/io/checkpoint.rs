//! Checkpoint directory: `manifest.json` plus `weights.bin`, a flat blob of
//! little-endian `f64` tensors concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dense::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::moe::convert_model;
use crate::numeric::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    Dense,
    Dsmoe { experts: usize, tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into `weights.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub mode: ModelKind,
    pub weights_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn kind_of(model: &Model) -> ModelKind {
    match (model.experts(), model.tau()) {
        (Some(experts), Some(tau)) => ModelKind::Dsmoe { experts, tau },
        _ => ModelKind::Dense,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.param_count() * 8);
    let mut tensors = Vec::new();
    for (name, m) in model.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape: [m.rows(), m.cols()],
            offset: blob.len() as u64,
        });
        for v in m.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config,
        mode: kind_of(model),
        weights_sha256: hex(&Sha256::digest(&blob)),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Integrity(format!("manifest serialization: {e}")))?;
    text.push('\n');
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, &blob).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("{}: {e}", mpath.display())))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Version {
            found: version.unwrap_or(0) as u32,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::Integrity(format!("{}: {e}", mpath.display())))
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    manifest.config.validate()?;
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;

    let mut model = Model::init(manifest.config, 0)?;
    if let ModelKind::Dsmoe { experts, tau } = manifest.mode {
        model = convert_model(&model, experts, tau, 0, 1.0)?;
    }
    let expected = model.named_tensors();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Integrity(format!(
            "manifest lists {} tensors, model layout needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut cursor = 0u64;
    for ((name, m), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || [m.rows(), m.cols()] != entry.shape || entry.offset != cursor {
            return Err(Error::Integrity(format!(
                "tensor table entry {} {:?}@{} does not match expected {} {:?}@{}",
                entry.name,
                entry.shape,
                entry.offset,
                name,
                m.shape(),
                cursor
            )));
        }
        cursor += (m.len() * 8) as u64;
    }
    if blob.len() as u64 != cursor {
        return Err(Error::Integrity(format!(
            "weights blob is {} bytes, manifest describes {cursor}",
            blob.len()
        )));
    }
    if hex(&Sha256::digest(&blob)) != manifest.weights_sha256 {
        return Err(Error::Integrity("weights checksum mismatch".into()));
    }
    for (entry, slot) in manifest.tensors.iter().zip(model.tensors_mut()) {
        let start = entry.offset as usize;
        let data: Vec<f64> = blob[start..start + slot.len() * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        *slot = Matrix::from_vec(entry.shape[0], entry.shape[1], data)
            .map_err(|e| Error::Integrity(format!("tensor {}: {e}", entry.name)))?;
    }
    Ok(model)
}
