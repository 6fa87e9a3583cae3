//! Directory checkpoint format: `meta.json` lists entry names and shapes in
//! storage order; `params.bin` holds the values as little-endian `f32`,
//! concatenated in that order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dtype: String,
    pub step: u64,
    pub entries: Vec<EntryMeta>,
    /// Owner-specific configuration (architecture, budget, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint<T: Real>(dir: &Path, params: &ParamSet<T>, extra: serde_json::Value) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(params.numel() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(EntryMeta {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
        for &v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        dtype: "f32".into(),
        step: params.step(),
        entries,
        extra,
    };
    fs::write(dir.join("params.bin"), bytes)?;
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet<f32>, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(NumError::Checkpoint(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    if meta.dtype != "f32" {
        return Err(NumError::Checkpoint(format!("unsupported dtype {}", meta.dtype)));
    }
    let bytes = fs::read(dir.join("params.bin"))?;
    let expected: usize = meta.entries.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
    if bytes.len() != expected {
        return Err(NumError::Checkpoint(format!(
            "params.bin holds {} bytes, meta describes {expected}",
            bytes.len()
        )));
    }
    let mut params = ParamSet::new();
    let mut off = 0;
    for e in &meta.entries {
        let n: usize = e.shape.iter().product();
        let data = bytes[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        off += 4 * n;
        params.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
    }
    params.set_step(meta.step);
    Ok((params, meta))
}

/// Total on-disk size of a checkpoint directory.
pub fn checkpoint_bytes(dir: &Path) -> Result<u64> {
    Ok(fs::metadata(dir.join("params.bin"))?.len() + fs::metadata(dir.join("meta.json"))?.len())
}
