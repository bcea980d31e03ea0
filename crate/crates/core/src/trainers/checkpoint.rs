//! Checkpoints: model weights, momentum buffers and a JSON training-state
//! sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig, TrainReport};
use crate::error::{IoContext, Result};
use crate::zoo::{build_model, read_weights, save_weights, tensors_bytes, ModelHandle, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub model: ModelSpec,
    /// File name of the momentum buffers, relative to the checkpoint.
    pub optimizer_buffers: String,
    pub config: TrainConfig,
    pub history: Vec<EpochMetrics>,
}

fn momentum_path(path: &Path) -> PathBuf {
    path.with_extension("momentum.safetensors")
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` (weights), its momentum file and its sidecar.
pub fn save_checkpoint(path: &Path, model: &ModelHandle, report: &TrainReport, config: &TrainConfig) -> Result<()> {
    save_weights(model, path)?;
    let mpath = momentum_path(path);
    fs::write(&mpath, tensors_bytes(&report.momentum, &model.spec.name)?).at(&mpath)?;
    let meta = CheckpointMeta {
        epoch: report.selected_epoch,
        model: model.spec.clone(),
        optimizer_buffers: mpath.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        config: config.clone(),
        history: report.history.clone(),
    };
    let side = meta_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&meta)?).at(side)
}

/// Rebuilds the model recorded in the sidecar and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<(ModelHandle, CheckpointMeta)> {
    let side = meta_path(path);
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&side).at(&side)?)?;
    let mut spec = meta.model.clone();
    spec.pretrained_weights = None;
    let mut model = build_model(&spec)?;
    model.load_all(&read_weights(path)?)?;
    Ok((model, meta))
}
