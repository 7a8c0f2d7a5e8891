//! Checkpoint serialization: a `manifest.json` describing the config and
//! tensor table, plus one little-endian f32 binary file per tensor.
//! Optimizer moments ride along under `optim.`-prefixed names so training
//! can resume from any checkpoint.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array4, ArrayD, Ix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::model::{param_specs, ModelConfig};
use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    pub val_mean_ae: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<CheckpointMeta>,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    /// Optimizer moments and similar sidecars, keyed by their full name.
    pub optim: Vec<(String, Array4<T>)>,
    pub meta: Option<CheckpointMeta>,
}

fn write_tensor<T: Scalar>(path: &Path, value: &Array4<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(value.len() * 4);
    for &v in value.iter() {
        bytes.extend_from_slice(&(v.to_f32().unwrap()).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_tensor<T: Scalar>(path: &Path, shape: &[usize]) -> Result<Array4<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected {} bytes for shape {shape:?}, found {}", n * 4, bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                path.display().to_string(),
                "non-finite tensor value",
            ));
        }
        values.push(T::from_f64_c(v as f64));
    }
    ArrayD::from_shape_vec(shape.to_vec(), values)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
        .into_dimensionality::<Ix4>()
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Writes config, parameters, and optional optimizer tensors into `dir`.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    config: &ModelConfig,
    store: &ParamStore<T>,
    optim: &[(String, Array4<T>)],
    meta: Option<CheckpointMeta>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut tensors = Vec::new();
    let mut write_one = |name: &str, value: &Array4<T>, idx: usize| -> Result<()> {
        let file = format!("t{idx:04}.bin");
        write_tensor(&dir.join(&file), value)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            file,
        });
        Ok(())
    };
    for i in 0..store.len() {
        write_one(store.name(i), store.value(i), i)?;
    }
    for (j, (name, value)) in optim.iter().enumerate() {
        write_one(name, value, store.len() + j)?;
    }
    let manifest = Manifest {
        config: *config,
        meta,
        tensors,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format("manifest.json", e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a checkpoint back; every config-implied tensor must be present
/// with the exact shape, otherwise FormatError.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    manifest
        .config
        .validate()
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
    for entry in &manifest.tensors {
        if by_name.insert(entry.name.as_str(), entry).is_some() {
            return Err(Error::format(
                path.display().to_string(),
                format!("duplicate tensor {}", entry.name),
            ));
        }
    }
    let mut store = ParamStore::new();
    for spec in param_specs(&manifest.config) {
        let entry = by_name.remove(spec.name.as_str()).ok_or_else(|| {
            Error::format(
                path.display().to_string(),
                format!("missing tensor {}", spec.name),
            )
        })?;
        if entry.shape != spec.shape {
            return Err(Error::format(
                entry.file.clone(),
                format!(
                    "tensor {} shape {:?}, expected {:?}",
                    spec.name, entry.shape, spec.shape
                ),
            ));
        }
        let value = read_tensor::<T>(&dir.join(&entry.file), &entry.shape)?;
        store.add(&spec.name, value.into_dyn(), spec.trainable);
    }
    let mut optim = Vec::new();
    for entry in manifest.tensors.iter() {
        if !by_name.contains_key(entry.name.as_str()) {
            continue; // consumed as a model tensor
        }
        if !entry.name.starts_with("optim.") {
            return Err(Error::format(
                path.display().to_string(),
                format!("unexpected tensor {}", entry.name),
            ));
        }
        let value = read_tensor::<T>(&dir.join(&entry.file), &entry.shape)?;
        optim.push((entry.name.clone(), value));
    }
    Ok(Checkpoint {
        config: manifest.config,
        store,
        optim,
        meta: manifest.meta,
    })
}
