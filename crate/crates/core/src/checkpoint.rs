//! Checkpoint directories: `manifest.json` plus one raw little-endian `f32`
//! blob per parameter, listed in the manifest in serialization order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Manifest {
    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}

pub fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_f32_blob(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn tensor_to_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

fn blob_name(index: usize, name: &str) -> String {
    let clean: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' }).collect();
    format!("{index:03}_{clean}.f32")
}

pub fn save<C: Serialize>(
    dir: &Path,
    kind: &str,
    seed: u64,
    config: &C,
    store: &ParamStore,
    metadata: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(store.len());
    for (i, (name, var)) in store.iter().enumerate() {
        let file = blob_name(i, name);
        write_f32_blob(&dir.join(&file), &tensor_to_f32(var.as_tensor())?)?;
        params.push(ParamEntry { name: name.to_string(), shape: var.dims().to_vec(), file });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        seed,
        config: serde_json::to_value(config)?,
        params,
        metadata,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads a manifest and checks its kind.
pub fn load_kind(dir: &Path, kind: &str) -> Result<Manifest> {
    let manifest = load_manifest(dir)?;
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!("{} holds a `{}` checkpoint, expected `{kind}`", dir.display(), manifest.kind)));
    }
    Ok(manifest)
}

/// Copies every blob listed in `manifest` into the matching parameter of `store`.
pub fn restore(dir: &Path, manifest: &Manifest, store: &ParamStore) -> Result<()> {
    if manifest.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for entry in &manifest.params {
        let values = read_f32_blob(&dir.join(&entry.file))?;
        let expected: usize = entry.shape.iter().product();
        if values.len() != expected {
            return Err(Error::Checkpoint(format!("blob {} has {} values, shape needs {expected}", entry.file, values.len())));
        }
        let t = Tensor::from_vec(values, entry.shape.as_slice(), &Device::Cpu)?;
        store.assign(&entry.name, &t)?;
    }
    Ok(())
}
