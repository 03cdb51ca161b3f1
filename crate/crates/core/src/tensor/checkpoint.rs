use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};
use crate::Scalar;

pub const CHECKPOINT_DTYPE: &str = "f32le";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub params: Vec<CheckpointEntry>,
}

fn ck_err(path: &Path, msg: impl ToString) -> TensorError {
    TensorError::Checkpoint { path: path.display().to_string(), msg: msg.to_string() }
}

/// Writes `manifest.json` plus one little-endian f32 blob per parameter.
pub fn save_checkpoint<T: Scalar>(dir: &Path, store: &ParamStore<T>) -> Result<CheckpointManifest, TensorError> {
    fs::create_dir_all(dir).map_err(|e| ck_err(dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let t = store.get(id);
        let file = format!("param_{:04}.bin", id.0);
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| ck_err(&path, e))?;
        params.push(CheckpointEntry { name: store.name(id).to_string(), shape: t.shape().to_vec(), file });
    }
    let manifest = CheckpointManifest { dtype: CHECKPOINT_DTYPE.to_string(), params };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| ck_err(&path, e))?;
    fs::write(&path, json).map_err(|e| ck_err(&path, e))?;
    Ok(manifest)
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<ParamStore<T>, TensorError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| ck_err(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| ck_err(&path, e))?;
    if manifest.dtype != CHECKPOINT_DTYPE {
        return Err(ck_err(&path, format!("unsupported dtype '{}'", manifest.dtype)));
    }
    let mut store = ParamStore::new();
    for entry in manifest.params {
        let blob_path = dir.join(&entry.file);
        let bytes = fs::read(&blob_path).map_err(|e| ck_err(&blob_path, e))?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(ck_err(&blob_path, format!("expected {} bytes for shape {:?}, found {}", n * 4, entry.shape, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        store.add(entry.name, Tensor::new(&entry.shape, data)?)?;
    }
    Ok(store)
}

impl<T: Scalar> ParamStore<T> {
    /// Copies values from `other` into matching names; every parameter of
    /// `self` must be present in `other` with the same shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), TensorError> {
        if other.len() != self.len() {
            return Err(TensorError::Contract(format!("expected {} parameters, found {}", self.len(), other.len())));
        }
        for id in self.ids().collect::<Vec<_>>() {
            let src = other.get(other.id(self.name(id))?);
            if src.shape() != self.get(id).shape() {
                return Err(TensorError::Shape { op: "load_from", lhs: self.get(id).shape().to_vec(), rhs: src.shape().to_vec() });
            }
            *self.get_mut(id) = src.clone();
        }
        Ok(())
    }
}
