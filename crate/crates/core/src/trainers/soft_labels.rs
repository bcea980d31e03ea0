//! Cached teacher probabilities.
//!
//! Binary layout: `SLBL`, then format version, row count and class count as
//! little-endian u32 (16 bytes in all), then the rows as little-endian f32.
//! Provenance lives in a JSON sidecar next to the binary file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ImageView, PreprocessSpec, SplitIndex};
use crate::error::{Error, IoContext, Result};
use crate::losses::{check_probs, softmax_into};
use crate::nn::Tensor;
use crate::zoo::{weights_bytes, ModelHandle};

const MAGIC: &[u8; 4] = b"SLBL";
const VERSION: u32 = 1;
const HEADER_BYTES: usize = 16;
const INFER_BATCH: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_id: String,
    pub dataset_checksum: String,
    pub split_seed: u64,
    pub temperature_used: f64,
}

/// Teacher probabilities for every training example, row `i` belonging to
/// `train_idx[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    pub provenance: Provenance,
    classes: usize,
    rows: Vec<f32>,
}

/// Content hash of a model's weights and spec.
pub fn teacher_id(model: &ModelHandle) -> Result<String> {
    let mut h = Sha256::new();
    h.update(weights_bytes(model)?);
    h.update(serde_json::to_vec(&model.spec)?);
    Ok(hex::encode(h.finalize()))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn check_row(i: usize, row: &[f32]) -> Result<()> {
    let wide: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    check_probs(&wide).map_err(|e| Error::invalid(format!("soft-label row {i}: {e}")))
}

impl SoftLabelSet {
    pub fn new(provenance: Provenance, classes: usize, rows: Vec<f32>) -> Result<Self> {
        if classes == 0 || rows.is_empty() || !rows.len().is_multiple_of(classes) {
            return Err(Error::shape(format!("{} values do not form rows of {classes}", rows.len())));
        }
        for (i, row) in rows.chunks_exact(classes).enumerate() {
            check_row(i, row)?;
        }
        Ok(Self {
            provenance,
            classes,
            rows,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len() / self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.classes..(i + 1) * self.classes]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 4 * self.rows.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.num_rows() as u32, self.classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], provenance: Provenance) -> Result<Self> {
        if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
            return Err(Error::Format("soft-label file lacks the SLBL header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        if word(1) != VERSION as usize {
            return Err(Error::Format(format!("soft-label format version {} unsupported", word(1))));
        }
        let (n, c) = (word(2), word(3));
        if bytes.len() != HEADER_BYTES + 4 * n * c {
            return Err(Error::Format(format!("soft-label file holds {} bytes, header says {n} x {c}", bytes.len())));
        }
        let rows = bytes[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(provenance, c, rows)
    }

    /// Writes the binary file at `path` and its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        fs::write(path, self.to_bytes()).at(path)?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_vec_pretty(&self.provenance)?).at(side)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Provenance(format!("soft-label file {} does not exist", path.display())));
        }
        let side = sidecar_path(path);
        let meta = fs::read(&side).map_err(|_| Error::Provenance(format!("missing provenance sidecar {}", side.display())))?;
        let provenance: Provenance = serde_json::from_slice(&meta)?;
        Self::from_bytes(&fs::read(path).at(path)?, provenance)
    }

    /// Checks that the rows were produced for this dataset, split and
    /// temperature (and, when given, this teacher).
    pub fn check(&self, checksum: &str, split: &SplitIndex, temperature: f64, teacher: Option<&str>) -> Result<()> {
        let p = &self.provenance;
        if p.dataset_checksum != checksum {
            return Err(Error::Provenance(format!(
                "soft labels built for dataset {}, not {checksum}",
                p.dataset_checksum
            )));
        }
        if p.split_seed != split.seed {
            return Err(Error::Provenance(format!("soft labels built for split seed {}, not {}", p.split_seed, split.seed)));
        }
        if self.num_rows() != split.train_idx.len() {
            return Err(Error::Provenance(format!(
                "{} soft-label rows for {} training examples",
                self.num_rows(),
                split.train_idx.len()
            )));
        }
        if p.temperature_used != temperature {
            return Err(Error::Provenance(format!(
                "soft labels use temperature {}, run expects {temperature}",
                p.temperature_used
            )));
        }
        if let Some(id) = teacher {
            if id != p.teacher_id {
                return Err(Error::Provenance(format!("soft labels come from teacher {}, not {id}", p.teacher_id)));
            }
        }
        Ok(())
    }
}

/// Tempered teacher probabilities, in f64, for a preprocessed batch.
pub(crate) fn teacher_probs(teacher: &ModelHandle, x: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    let logits = teacher.forward(x)?;
    let c = teacher.num_classes();
    let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let mut p = vec![0.0; z.len()];
    for (zr, pr) in z.chunks_exact(c).zip(p.chunks_exact_mut(c)) {
        softmax_into(zr, temperature, pr);
    }
    Ok(p)
}

/// Evaluation-mode teacher probabilities for every id in `split.train_idx`,
/// labeled and unlabeled alike, on un-augmented images.
pub fn generate_soft_labels(
    teacher: &ModelHandle,
    images: ImageView<'_>,
    split: &SplitIndex,
    preprocess: &PreprocessSpec,
    temperature: f64,
) -> Result<SoftLabelSet> {
    if preprocess.augment_enabled {
        return Err(Error::invalid("soft labels must be generated with augmentation disabled"));
    }
    if split.checksum != images.checksum() {
        return Err(Error::Provenance(format!(
            "split belongs to dataset {}, images to {}",
            split.checksum,
            images.checksum()
        )));
    }
    if split.train_idx.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let mut rows = Vec::with_capacity(split.train_idx.len() * teacher.num_classes());
    for ids in split.train_idx.chunks(INFER_BATCH) {
        let streams = vec![0; ids.len()];
        let x = Tensor::new(
            vec![ids.len(), 3, 32, 32],
            crate::dataset::preprocess_batch(images, ids, preprocess, &streams),
        )?;
        rows.extend(teacher_probs(teacher, &x, temperature)?.into_iter().map(|v| v as f32));
    }
    let provenance = Provenance {
        teacher_id: teacher_id(teacher)?,
        dataset_checksum: images.checksum().to_string(),
        split_seed: split.seed,
        temperature_used: temperature,
    };
    SoftLabelSet::new(provenance, teacher.num_classes(), rows)
}
