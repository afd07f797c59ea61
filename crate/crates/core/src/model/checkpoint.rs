//! Checkpoint directories: `manifest.toml` plus one NCTD file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backbone::Model;
use super::config::ModelConfig;
use super::params::ParamStore;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::rng::Rng;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    #[serde(default)]
    pub epoch: usize,
    #[serde(default)]
    pub step: usize,
    pub model: ModelConfig,
    #[serde(default, rename = "tensor")]
    pub tensors: Vec<TensorEntry>,
}

/// Writes `params` under `dir`, creating it if needed.
pub fn save_checkpoint<T: Element>(
    dir: impl AsRef<Path>,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    epoch: usize,
    step: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.len());
    for (i, (meta, value)) in params.iter().enumerate() {
        let file = format!("{i:04}.nctd");
        write_tensor(dir.join(&file), value)?;
        tensors.push(TensorEntry {
            name: meta.name.clone(),
            shape: value.shape().to_vec(),
            dtype: T::DTYPE.name().into(),
            file,
        });
    }
    let manifest = Manifest {
        format: 1,
        epoch,
        step,
        model: cfg.clone(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST))?;
    let m: Manifest =
        toml::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    if m.format != 1 {
        return Err(Error::format(
            "format",
            format!("unsupported checkpoint format {}", m.format),
        ));
    }
    m.model.validate()?;
    Ok(m)
}

/// Rebuilds the model from the manifest and loads every tensor, converting
/// to `T` when the stored dtype differs.
pub fn load_checkpoint<T: Element>(
    dir: impl AsRef<Path>,
) -> Result<(Model, ParamStore<T>, Manifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let (model, mut params) = Model::build::<T>(&manifest.model, &mut Rng::new(0))?;
    if manifest.tensors.len() != params.len() {
        return Err(Error::format(
            "tensor",
            format!(
                "checkpoint lists {} tensors, model has {}",
                manifest.tensors.len(),
                params.len()
            ),
        ));
    }
    for entry in &manifest.tensors {
        let id = params
            .id(&entry.name)
            .ok_or_else(|| Error::format("tensor", format!("unknown tensor {:?}", entry.name)))?;
        let value = read_tensor(dir.join(&entry.file))?;
        if value.shape() != entry.shape.as_slice() {
            return Err(Error::format(
                "shape",
                format!(
                    "{}: manifest {:?}, file {:?}",
                    entry.name,
                    entry.shape,
                    value.shape()
                ),
            ));
        }
        params.set(id, value.into_dtype())?;
    }
    Ok((model, params, manifest))
}
