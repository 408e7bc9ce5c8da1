//! Versioned checkpoint container: a JSON manifest (format version, config
//! snapshot, normalization stats, parameter name -> shape) followed by the
//! raw little-endian 64-bit float arrays in manifest order. Load restores
//! forward outputs bit-for-bit.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SsdNet;
use crate::train::{ModelBundle, TrainConfig};

const MAGIC: &[u8; 4] = b"SSDN";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    profile: crate::data::DatasetProfile,
    n_cov: usize,
    stats: Vec<crate::data::NormalizationStats>,
    params: Vec<ParamEntry>,
}

pub fn save_bundle(bundle: &ModelBundle, path: &std::path::Path) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: bundle.config.clone(),
        profile: bundle.profile.clone(),
        n_cov: bundle.model.n_cov,
        stats: bundle.stats.clone(),
        params: bundle
            .model
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    file.write_all(MAGIC).map_err(io)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())
        .map_err(io)?;
    file.write_all(&manifest_json).map_err(io)?;
    for p in bundle.model.params.iter() {
        for &v in p.value.data() {
            file.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn load_bundle(path: &std::path::Path) -> Result<ModelBundle> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut v4 = [0u8; 4];
    file.read_exact(&mut v4).map_err(io)?;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let mut l8 = [0u8; 8];
    file.read_exact(&mut l8).map_err(io)?;
    let mlen = u64::from_le_bytes(l8) as usize;
    let mut mbuf = vec![0u8; mlen];
    file.read_exact(&mut mbuf).map_err(io)?;
    let manifest: Manifest = serde_json::from_slice(&mbuf)
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;

    // Rebuild the model skeleton, then overwrite every parameter from the
    // file, verifying names and shapes.
    let mut model = SsdNet::new(manifest.config.model.clone(), manifest.n_cov, manifest.config.seed)?;
    if manifest.params.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match model ({})",
            manifest.params.len(),
            model.params.len()
        )));
    }
    let mut values = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let expected = model
            .params
            .get(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?
            .value
            .shape()
            .to_vec();
        if expected != entry.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {}: shape {:?} in file, model expects {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf).map_err(|e| {
            Error::Checkpoint(format!("parameter {}: truncated data: {e}", entry.name))
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push((entry.name.clone(), crate::tensor::Tensor::new(entry.shape.clone(), data)?));
    }
    // Manifest order must match the model's canonical order so the raw
    // arrays line up.
    let mut snapshot = model.params.snapshot();
    for (i, p) in model.params.iter().enumerate() {
        let (name, tensor) = &values[i];
        if name != &p.name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch at {i}: {} in file, model has {}",
                name, p.name
            )));
        }
        snapshot[i] = tensor.clone();
    }
    model.params.restore(&snapshot);
    Ok(ModelBundle {
        model,
        stats: manifest.stats,
        config: manifest.config,
        profile: manifest.profile,
    })
}
