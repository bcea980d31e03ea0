//! Supervised teacher training, KL distillation of students, soft-label
//! caching and evaluation.
//!
//! Runs are deterministic for a given seed: the epoch shuffle comes from a
//! seeded ChaCha stream and each example's augmentation from
//! [`example_stream`], so neither depends on thread count.

mod checkpoint;
mod optim;
mod soft_labels;

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use optim::{sgd_momentum_update, Real, Sgd};
pub use soft_labels::{generate_soft_labels, sidecar_path, teacher_id, Provenance, SoftLabelSet};

use crate::dataset::{example_stream, preprocess_batch, DatasetSource, ImageView, PreprocessSpec, SplitIndex};
use crate::dataset::{CHANNELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_flat, distillation_loss_flat};
use crate::nn::Tensor;
use crate::zoo::{ModelHandle, ModelSpec};

const EVAL_BATCH: usize = 128;
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    BestVal,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub checkpoint_policy: CheckpointPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            momentum: 0.9,
            weight_decay: 5e-4,
            learning_rate: 0.01,
            batch_size: 128,
            seed: 0,
            temperature: 1.0,
            checkpoint_policy: CheckpointPolicy::BestVal,
        }
    }
}

impl TrainConfig {
    /// Defaults with the registry learning rate and batch size of `spec`.
    pub fn for_model(spec: &ModelSpec) -> Self {
        Self {
            learning_rate: spec.learning_rate,
            batch_size: spec.default_batch_size(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }

    fn optimizer(&self) -> Sgd {
        Sgd::new(self.learning_rate, self.momentum, self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    /// 1-based epoch whose weights were kept.
    pub selected_epoch: usize,
    pub policy: CheckpointPolicy,
    /// Momentum buffers at the selected epoch.
    #[serde(skip)]
    pub momentum: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl TrainReport {
    pub fn selected(&self) -> &EpochMetrics {
        &self.history[self.selected_epoch - 1]
    }

    pub fn last(&self) -> &EpochMetrics {
        self.history.last().expect("a run has at least one epoch")
    }
}

/// Index of the epoch with the highest val accuracy; ties go to the earliest.
pub fn best_val_epoch(history: &[EpochMetrics]) -> Option<usize> {
    let mut best: Option<&EpochMetrics> = None;
    for m in history {
        if best.is_none_or(|b| m.val_accuracy > b.val_accuracy) {
            best = Some(m);
        }
    }
    best.map(|m| m.epoch)
}

/// Dataset, split and preprocessing shared by every stage of a run.
#[derive(Clone, Copy)]
pub struct RunData<'a> {
    pub source: &'a DatasetSource,
    pub split: &'a SplitIndex,
    pub preprocess: &'a PreprocessSpec,
}

impl<'a> RunData<'a> {
    fn check(&self) -> Result<()> {
        self.preprocess.validate()?;
        if self.split.checksum != self.source.checksum {
            return Err(Error::Provenance(format!(
                "split belongs to dataset {}, not {}",
                self.split.checksum, self.source.checksum
            )));
        }
        if self.split.val_idx.is_empty() {
            return Err(Error::invalid("empty validation split"));
        }
        Ok(())
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn image_tensor(images: ImageView<'_>, ids: &[usize], spec: &PreprocessSpec, streams: &[u64]) -> Result<Tensor> {
    Tensor::new(
        vec![ids.len(), CHANNELS, IMAGE_SIDE, IMAGE_SIDE],
        preprocess_batch(images, ids, spec, streams),
    )
}

/// Fraction of `ids` whose argmax prediction (lowest index on ties) equals
/// the ground-truth label, on un-augmented images.
pub fn evaluate(model: &ModelHandle, source: &DatasetSource, ids: &[usize], preprocess: &PreprocessSpec) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::invalid("evaluate: empty index set"));
    }
    let clean = preprocess.without_augmentation();
    let c = model.num_classes();
    let mut correct = 0usize;
    for chunk in ids.chunks(EVAL_BATCH) {
        let x = image_tensor(source.images_only(), chunk, &clean, &vec![0; chunk.len()])?;
        let logits = model.forward(&x)?;
        correct += logits
            .data()
            .chunks_exact(c)
            .zip(chunk)
            .filter(|(row, &id)| argmax(row) == source.label(id))
            .count();
    }
    Ok(correct as f64 / ids.len() as f64)
}

fn snapshot(model: &ModelHandle) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    model.visit(&mut |p| out.push(p.value.clone()));
    out
}

fn restore(model: &mut ModelHandle, values: Vec<Vec<f32>>) {
    let mut it = values.into_iter();
    model.visit_mut(&mut |p| p.value = it.next().expect("snapshot of the same model"));
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM ^ epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One optimisation step: returns the batch-mean loss after writing
/// gradients into the model.
type StepFn<'s> = dyn FnMut(&mut ModelHandle, &[usize], &Tensor) -> Result<f64> + 's;

/// Val accuracy, epoch, weights and optimizer buffers of the best epoch so far.
type Snapshot = (f64, usize, Vec<Vec<f32>>, Vec<(String, Vec<usize>, Vec<f32>)>);

/// Shared epoch loop. `ids` are the examples optimised over; `positions`
/// passed to `step` index into `ids`. Monitoring (accuracies) runs after
/// every epoch on `train_eval` and the validation split.
fn run_epochs(
    model: &mut ModelHandle,
    images: ImageView<'_>,
    ids: &[usize],
    config: &TrainConfig,
    preprocess: &PreprocessSpec,
    step: &mut StepFn<'_>,
    monitor: &mut dyn FnMut(&ModelHandle) -> Result<(f64, f64)>,
) -> Result<TrainReport> {
    let mut opt = config.optimizer();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<Snapshot> = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let order = epoch_order(ids.len(), config.seed, epoch);
        let mut loss_sum = 0.0;
        for positions in order.chunks(config.batch_size) {
            let batch: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
            let streams: Vec<u64> = batch.iter().map(|&id| example_stream(config.seed, epoch as u64, id as u64)).collect();
            let x = image_tensor(images, &batch, preprocess, &streams)?;
            model.zero_grad();
            let loss = step(model, positions, &x)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss diverged in epoch {epoch}")));
            }
            opt.step(model);
            loss_sum += loss * positions.len() as f64;
        }
        let (train_accuracy, val_accuracy) = monitor(model)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / ids.len() as f64,
            train_accuracy,
            val_accuracy,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} train {:.4} val {:.4} ({:.1}s)",
            model.spec.name,
            m.train_loss,
            m.train_accuracy,
            m.val_accuracy,
            m.wall_time
        );
        let improved = best.as_ref().is_none_or(|b| val_accuracy > b.0);
        if config.checkpoint_policy == CheckpointPolicy::BestVal && improved {
            best = Some((val_accuracy, epoch, snapshot(model), opt.buffers().to_vec()));
        }
        history.push(m);
    }
    let (selected_epoch, momentum) = match best {
        Some((_, epoch, values, momentum)) => {
            restore(model, values);
            (epoch, momentum)
        }
        None => (config.epochs, opt.buffers().to_vec()),
    };
    Ok(TrainReport {
        history,
        selected_epoch,
        policy: config.checkpoint_policy,
        momentum,
    })
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn grad_tensor(shape: &[usize], g: &[f64]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), g.iter().map(|&v| v as f32).collect())
}

/// Supervised training with cross-entropy on `labeled_idx`, which must be a
/// subset of the training split. Train accuracy is measured on `labeled_idx`.
pub fn train_teacher(
    mut model: ModelHandle,
    data: RunData<'_>,
    labeled_idx: &[usize],
    config: &TrainConfig,
) -> Result<(ModelHandle, TrainReport)> {
    config.validate()?;
    data.check()?;
    if labeled_idx.is_empty() {
        return Err(Error::invalid("train_teacher: empty labeled set"));
    }
    let train: HashSet<usize> = data.split.train_idx.iter().copied().collect();
    if let Some(id) = labeled_idx.iter().find(|id| !train.contains(id)) {
        return Err(Error::invalid(format!("labeled example {id} is not in the training split")));
    }
    let source = data.source;
    let labels: Vec<usize> = labeled_idx.iter().map(|&id| source.label(id)).collect();
    let classes = model.num_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {y} exceeds the {classes}-way head")));
    }
    let mut step = |m: &mut ModelHandle, positions: &[usize], x: &Tensor| -> Result<f64> {
        let logits = m.forward_train(x)?;
        let y: Vec<usize> = positions.iter().map(|&p| labels[p]).collect();
        let mut g = vec![0.0; logits.data().len()];
        let loss = cross_entropy_flat(&to_f64(&logits), &y, classes, Some(&mut g))?;
        m.backward(&grad_tensor(logits.shape(), &g)?)?;
        Ok(loss)
    };
    let mut monitor = |m: &ModelHandle| -> Result<(f64, f64)> {
        Ok((
            evaluate(m, source, labeled_idx, data.preprocess)?,
            evaluate(m, source, &data.split.val_idx, data.preprocess)?,
        ))
    };
    let report = run_epochs(
        &mut model,
        source.images_only(),
        labeled_idx,
        config,
        data.preprocess,
        &mut step,
        &mut monitor,
    )?;
    Ok((model, report))
}

/// Where distillation targets come from.
#[derive(Clone, Copy)]
pub enum TeacherSignal<'a> {
    /// Rows precomputed on clean images; the student sees augmented inputs.
    Cached(&'a SoftLabelSet),
    /// Teacher evaluated on the student's exact (augmented) batch each step.
    Live(&'a ModelHandle),
}

/// Trains `student` to match the teacher distribution over every example of
/// the training split by minimising the mean KL divergence.
///
/// The optimisation path only sees an [`ImageView`]; labels are read solely
/// by the per-epoch accuracy monitor.
pub fn distill_student(
    mut student: ModelHandle,
    teacher: TeacherSignal<'_>,
    data: RunData<'_>,
    config: &TrainConfig,
) -> Result<(ModelHandle, TrainReport)> {
    config.validate()?;
    data.check()?;
    let train_idx = &data.split.train_idx;
    if train_idx.is_empty() {
        return Err(Error::invalid("distill_student: empty training split"));
    }
    let classes = student.num_classes();
    match teacher {
        TeacherSignal::Cached(soft) => {
            soft.check(&data.source.checksum, data.split, config.temperature, None)?;
            if soft.num_classes() != classes {
                return Err(Error::shape(format!(
                    "{}-class soft labels for a {classes}-way student",
                    soft.num_classes()
                )));
            }
        }
        TeacherSignal::Live(t) if t.num_classes() != classes => {
            return Err(Error::shape(format!("{}-way teacher for a {classes}-way student", t.num_classes())));
        }
        TeacherSignal::Live(_) => {}
    }
    let temperature = config.temperature;
    let mut step = |m: &mut ModelHandle, positions: &[usize], x: &Tensor| -> Result<f64> {
        let p: Vec<f64> = match teacher {
            TeacherSignal::Cached(soft) => positions
                .iter()
                .flat_map(|&pos| soft.row(pos).iter().map(|&v| v as f64))
                .collect(),
            TeacherSignal::Live(t) => soft_labels::teacher_probs(t, x, temperature)?,
        };
        let logits = m.forward_train(x)?;
        let mut g = vec![0.0; logits.data().len()];
        let loss = distillation_loss_flat(&p, &to_f64(&logits), classes, temperature, Some(&mut g))?;
        m.backward(&grad_tensor(logits.shape(), &g)?)?;
        Ok(loss)
    };
    let source = data.source;
    let mut monitor = |m: &ModelHandle| -> Result<(f64, f64)> {
        Ok((
            evaluate(m, source, train_idx, data.preprocess)?,
            evaluate(m, source, &data.split.val_idx, data.preprocess)?,
        ))
    };
    let report = run_epochs(
        &mut student,
        source.images_only(),
        train_idx,
        config,
        data.preprocess,
        &mut step,
        &mut monitor,
    )?;
    Ok((student, report))
}

#[cfg(test)]
mod tests;
