//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "MMAECKPT"
//! version    u32       1
//! manifest   u64 length, then that many bytes of UTF-8 JSON
//! payload    every array's f64 values, row-major, in manifest order
//! ```
//!
//! The manifest records the model configuration, the epoch, the loss
//! history, an echo of the run configuration and, per array, its name,
//! element type, shape and byte offset into the payload.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mmae, ModelConfig};
use crate::training::LossRecord;

pub const MAGIC: &[u8; 8] = b"MMAECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub epoch: usize,
    pub loss_history: Vec<LossRecord>,
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

pub fn save(
    path: &Path,
    model: &Mmae,
    epoch: usize,
    loss_history: &[LossRecord],
    config: &serde_json::Value,
) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for p in model.params() {
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            dtype: "f64".into(),
            shape: p.shape.clone(),
            offset: payload.len() as u64,
        });
        for v in &p.value {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        model: model.config.clone(),
        epoch,
        loss_history: loss_history.to_vec(),
        config: config.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("cannot encode manifest: {e}")))?;

    let mut bytes = Vec::with_capacity(8 + 4 + 8 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Mmae, Manifest)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));

    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| bad(&format!("bad manifest: {e}")))?;
    let payload = &bytes[20 + len..];

    // Architecture from the config, values from the payload.
    let mut model = Mmae::new(manifest.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut by_name: HashMap<&str, &ArrayEntry> = manifest
        .arrays
        .iter()
        .map(|a| (a.name.as_str(), a))
        .collect();
    for p in model.params_mut() {
        let entry = by_name
            .remove(p.name.as_str())
            .ok_or_else(|| bad(&format!("missing array {}", p.name)))?;
        if entry.dtype != "f64" {
            return Err(bad(&format!(
                "array {} has unsupported dtype {}",
                p.name, entry.dtype
            )));
        }
        if entry.shape != p.shape {
            return Err(bad(&format!(
                "array {} has shape {:?}, model expects {:?}",
                p.name, entry.shape, p.shape
            )));
        }
        let start = entry.offset as usize;
        let raw = payload
            .get(start..start + 8 * p.value.len())
            .ok_or_else(|| bad(&format!("array {} runs past the end of the file", p.name)))?;
        for (v, chunk) in p.value.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if let Some(name) = by_name.keys().next() {
        return Err(bad(&format!("unexpected array {name}")));
    }
    Ok((model, manifest))
}
