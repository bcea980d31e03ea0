//! Weight files in the safetensors format (little-endian f32, one tensor per
//! parameter or buffer, keyed by dotted layer name).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::ModelHandle;
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightsFile {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub metadata: BTreeMap<String, String>,
}

impl WeightsFile {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Format(format!("weights: {e}")))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Format(format!("tensor {name} has dtype {:?}, expected F32", view.dtype())));
            }
            let values = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(name, (view.shape().to_vec(), values));
        }
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Format(format!("weights: {e}")))?;
        let metadata = meta.metadata().clone().unwrap_or_default().into_iter().collect();
        Ok(Self { tensors, metadata })
    }
}

/// Serialized weights of `model`. Byte-identical for identical models.
pub fn weights_bytes(model: &ModelHandle) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    model.visit(&mut |p| tensors.push((p.name.clone(), p.shape.clone(), p.value.clone())));
    tensors_bytes(&tensors, &model.spec.name)
}

/// Serializes named f32 tensors, tagging the file with `architecture`.
pub fn tensors_bytes(tensors: &[(String, Vec<usize>, Vec<f32>)], architecture: &str) -> Result<Vec<u8>> {
    let raw: Vec<Vec<u8>> = tensors
        .iter()
        .map(|(_, _, values)| values.iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    let views = tensors
        .iter()
        .zip(&raw)
        .map(|((name, shape, _), bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    // A single key: multi-key metadata would serialize in hash order.
    let meta = HashMap::from([("architecture".to_string(), architecture.to_string())]);
    safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Format(format!("weights: {e}")))
}

pub fn save_weights(model: &ModelHandle, path: &Path) -> Result<()> {
    let bytes = weights_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    std::fs::write(path, bytes).at(path)
}

pub fn read_weights(path: &Path) -> Result<WeightsFile> {
    let bytes = std::fs::read(path).at(path)?;
    WeightsFile::from_bytes(&bytes)
}

/// Copies every tensor of `model` accepted by `filter` from `file`. A tensor
/// that is missing or has a different shape is an error; extra tensors in
/// the file are ignored.
pub fn load_weights(model: &mut ModelHandle, file: &WeightsFile, filter: impl Fn(&str) -> bool) -> Result<()> {
    let mut err = None;
    model.visit_mut(&mut |p| {
        if err.is_some() || !filter(&p.name) {
            return;
        }
        match file.tensors.get(&p.name) {
            None => err = Some(Error::shape(format!("weights file has no tensor {}", p.name))),
            Some((shape, _)) if *shape != p.shape => {
                err = Some(Error::shape(format!("tensor {}: file shape {shape:?}, model shape {:?}", p.name, p.shape)))
            }
            Some((_, values)) => p.value.clone_from(values),
        }
    });
    if err.is_none() {
        model.state_version += 1;
    }
    err.map_or(Ok(()), Err)
}
