//! Checkpoints: a safetensors weight file next to a JSON manifest holding the
//! model configuration, training position and tensor inventory.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::model::LaneDetector;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub step: u64,
    pub epoch: usize,
    pub weights: String,
    pub weights_sha256: String,
    pub tensors: Vec<TensorInfo>,
}

/// Writes `<stem>.safetensors` and `<stem>.json` into `dir`; returns the
/// manifest path.
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    model: &ModelConfig,
    varmap: &VarMap,
    step: u64,
    epoch: usize,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let weights = format!("{stem}.safetensors");
    let wpath = dir.join(&weights);
    varmap.save(&wpath)?;
    let digest = hex::encode(Sha256::digest(fs::read(&wpath)?));
    let mut tensors: Vec<TensorInfo> = varmap
        .data()
        .lock()
        .expect("variable map lock")
        .iter()
        .map(|(name, var)| TensorInfo {
            name: name.clone(),
            shape: var.dims().to_vec(),
            dtype: format!("{:?}", var.dtype()).to_lowercase(),
        })
        .collect();
    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_VERSION,
        model: model.clone(),
        step,
        epoch,
        weights,
        weights_sha256: digest,
        tensors,
    };
    let mpath = dir.join(format!("{stem}.json"));
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
    Ok(mpath)
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if m.schema_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint schema {} is not supported (expected {CHECKPOINT_VERSION})",
            m.schema_version
        )));
    }
    Ok(m)
}

fn manifest_dtype(m: &CheckpointManifest) -> DType {
    match m.tensors.first().map(|t| t.dtype.as_str()) {
        Some("f64") => DType::F64,
        _ => DType::F32,
    }
}

pub struct LoadedCheckpoint {
    pub model: LaneDetector,
    pub varmap: VarMap,
    pub manifest: CheckpointManifest,
}

impl LoadedCheckpoint {
    pub fn model_dtype(&self) -> DType {
        manifest_dtype(&self.manifest)
    }
}

/// Rebuilds the model from a manifest path and loads its weights. The weight
/// file must match the recorded digest.
pub fn load_checkpoint(manifest_path: &Path, device: &Device) -> Result<LoadedCheckpoint> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let wpath = dir.join(&manifest.weights);
    let digest = hex::encode(Sha256::digest(fs::read(&wpath)?));
    if digest != manifest.weights_sha256 {
        return Err(Error::Format(format!(
            "{} does not match the digest recorded in {}",
            wpath.display(),
            manifest_path.display()
        )));
    }
    let dtype = manifest_dtype(&manifest);
    let mut varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, dtype, device);
    let model = LaneDetector::new(&manifest.model, vb)?;
    varmap.load(&wpath)?;
    Ok(LoadedCheckpoint {
        model,
        varmap,
        manifest,
    })
}
