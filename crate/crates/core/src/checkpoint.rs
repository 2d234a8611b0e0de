//! Checkpoints: a raw little-endian `f32` payload plus a JSON index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub byte_length: u64,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format_version: u32,
    /// Resolved run configuration the parameters were produced with.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes the parameter payload and its JSON index.
pub fn save(
    store: &ParamStore,
    config: &impl Serialize,
    bin_path: &Path,
    index_path: &Path,
) -> Result<()> {
    let mut payload = Vec::with_capacity(store.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        let offset = payload.len() as u64;
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            offset,
            byte_length: payload.len() as u64 - offset,
            format_version: FORMAT_VERSION,
        });
    }
    let index = CheckpointIndex {
        format_version: FORMAT_VERSION,
        config: serde_json::to_value(config).map_err(|e| Error::json(index_path, e))?,
        tensors,
    };
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::json(index_path, e))?;
    fs::write(bin_path, payload).map_err(|e| Error::io(bin_path, e))?;
    fs::write(index_path, json).map_err(|e| Error::io(index_path, e))?;
    Ok(())
}

/// Reads a checkpoint into a fresh store (insertion order follows the index).
pub fn load(bin_path: &Path, index_path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let index: CheckpointIndex =
        serde_json::from_str(&text).map_err(|e| Error::json(index_path, e))?;
    if index.format_version != FORMAT_VERSION {
        return Err(Error::InvalidInput(format!(
            "{}: unsupported checkpoint format version {}",
            index_path.display(),
            index.format_version
        )));
    }
    let payload = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let mut store = ParamStore::new();
    for e in &index.tensors {
        let numel: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.byte_length as usize);
        if len != numel * 4 || start + len > payload.len() {
            return Err(Error::InvalidInput(format!(
                "{}: tensor {} has inconsistent extent",
                index_path.display(),
                e.name
            )));
        }
        let data = payload[start..start + len]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok((store, index.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.125, 3.0]).unwrap());
        store.add("b", Tensor::vector(vec![0.1]));
        let (bin, idx) = (dir.path().join("c.bin"), dir.path().join("c.json"));
        save(&store, &serde_json::json!({"lr": 0.1}), &bin, &idx).unwrap();
        let (loaded, cfg) = load(&bin, &idx).unwrap();
        assert_eq!(cfg["lr"], 0.1);
        assert_eq!(loaded.get(loaded.id("a").unwrap()).data(), &[1.0, -2.5, 0.125, 3.0]);
        assert_eq!(loaded.get(loaded.id("b").unwrap()).data()[0], f64::from(0.1f32));
        assert_eq!(fs::metadata(&bin).unwrap().len(), 20);
    }
}
