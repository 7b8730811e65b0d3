use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::Task;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelShape, Parameters, PedestrianModel, VehicleModel};

use super::TrainConfig;

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const FORMAT: &str = "xmodal-checkpoint/1";
const TENSOR_DIR: &str = "tensors";

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Pedestrian(PedestrianModel),
    Vehicle(VehicleModel),
}

impl TrainedModel {
    pub fn task(&self) -> Task {
        match self {
            TrainedModel::Pedestrian(_) => Task::Pedestrian,
            TrainedModel::Vehicle(_) => Task::Vehicle,
        }
    }

    pub fn params(&self) -> &dyn Parameters {
        match self {
            TrainedModel::Pedestrian(m) => m,
            TrainedModel::Vehicle(m) => m,
        }
    }

    fn params_mut(&mut self) -> &mut dyn Parameters {
        match self {
            TrainedModel::Pedestrian(m) => m,
            TrainedModel::Vehicle(m) => m,
        }
    }

    pub fn encoder(&self) -> &crate::model::DualEncoder {
        match self {
            TrainedModel::Pedestrian(m) => &m.encoder,
            TrainedModel::Vehicle(m) => &m.encoder,
        }
    }
}

/// Everything needed to rebuild and interpret a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub task: Task,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub shape: ModelShape,
    /// Whether vehicle images were color-patched during training.
    pub augmentation: bool,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: TrainedModel,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Fresh model with the given shape; parameter values are placeholders.
pub fn empty_model(task: Task, cfg: &ModelConfig, shape: &ModelShape) -> TrainedModel {
    match task {
        Task::Pedestrian => TrainedModel::Pedestrian(PedestrianModel::new(cfg, shape, 0)),
        Task::Vehicle => TrainedModel::Vehicle(VehicleModel::new(cfg, shape, 1.0, 0)),
    }
}

/// Writes `manifest.json` and one little-endian f64 file per tensor.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let tdir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut entries = Vec::new();
    for (name, shape, data) in ckpt.model.params().tensors() {
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let file = format!("{TENSOR_DIR}/{name}.f64");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name,
            shape,
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        meta: ckpt.meta.clone(),
        tensors: entries,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads a checkpoint, verifying structure and every tensor hash.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: dir.to_path_buf(),
        reason,
    };
    let raw = fs::read(dir.join(CHECKPOINT_MANIFEST)).map_err(|e| corrupt(format!("manifest unreadable: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| corrupt(format!("manifest invalid: {e}")))?;
    if manifest.format != FORMAT {
        return Err(corrupt(format!("unsupported format {}", manifest.format)));
    }
    let meta = manifest.meta;
    let mut model = empty_model(meta.task, &meta.config.model, &meta.shape);
    let expected: Vec<(String, Vec<usize>)> = model.params().tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    if expected.len() != manifest.tensors.len() {
        return Err(corrupt(format!(
            "expected {} tensors, manifest lists {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    let mut values = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(corrupt(format!(
                "tensor {} does not match model layout ({name})",
                entry.name
            )));
        }
        let bytes = fs::read(dir.join(&entry.file)).map_err(|e| corrupt(format!("{}: {e}", entry.file)))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(corrupt(format!("{}: sha256 mismatch", entry.file)));
        }
        let n: usize = shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(corrupt(format!(
                "{}: expected {} bytes, found {}",
                entry.file,
                n * 8,
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(format!("{}: non-finite value", entry.file)));
        }
        values.push(data);
    }
    for (slot, data) in model.params_mut().tensors_mut().into_iter().zip(values) {
        slot.copy_from_slice(&data);
    }
    Ok(Checkpoint { meta, model })
}
