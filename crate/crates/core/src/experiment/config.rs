use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::synthetic::SyntheticSpec;
use crate::error::{Error, IoContext, Result};
use crate::trainers::TrainConfig;
use crate::zoo::{ModelSpec, Registry};

/// The schema every config is checked against, published alongside the crate.
pub const CONFIG_SCHEMA: &str = include_str!("../../schema/experiment_config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// CIFAR-10 binary release at this path.
    Cifar { path: PathBuf },
    /// Generated CIFAR-format images.
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subset {
    pub train: usize,
    pub val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub split_seed: u64,
    /// Keep only this many train / val examples of the split.
    #[serde(default)]
    pub subset: Option<Subset>,
    #[serde(default = "yes")]
    pub stratified: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    #[default]
    Cached,
    Live,
}

fn default_fractions() -> Vec<f64> {
    vec![0.10, 0.25, 0.50, 1.00]
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub registry: Registry,
    pub teacher_specs: Vec<ModelSpec>,
    pub student_specs: Vec<ModelSpec>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Shared optimiser settings. `learning_rate` is replaced per run by the
    /// teacher's registry rate, which its students reuse.
    pub train_config: TrainConfig,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub signal: SignalMode,
    /// Also record undistilled baselines (the student architecture trained
    /// supervised on the same labels).
    #[serde(default)]
    pub include_baselines: bool,
    /// Cells run concurrently.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl ExperimentConfig {
    /// A desk-registry sweep over every tier on synthetic data.
    pub fn desk_default(output_dir: impl Into<PathBuf>) -> Self {
        let specs: Vec<ModelSpec> = crate::zoo::registered_names(Registry::Desk)
            .into_iter()
            .map(|n| ModelSpec::registered(n).expect("registered"))
            .collect();
        Self {
            registry: Registry::Desk,
            teacher_specs: specs.clone(),
            student_specs: specs.clone(),
            fractions: default_fractions(),
            seeds: vec![0],
            train_config: TrainConfig::for_model(&specs[0]),
            output_dir: output_dir.into(),
            data: DataConfig {
                source: DataSource::Synthetic(SyntheticSpec::default()),
                split_seed: 0,
                subset: None,
                stratified: true,
            },
            signal: SignalMode::Cached,
            include_baselines: false,
            jobs: 1,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher_specs.is_empty() || self.student_specs.is_empty() {
            return Err(Error::invalid("teacher_specs and student_specs must be non-empty"));
        }
        if self.fractions.is_empty() {
            return Err(Error::invalid("fractions must be non-empty"));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::invalid(format!("fraction {f} outside (0, 1]")));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must be non-empty"));
        }
        if self.jobs == 0 {
            return Err(Error::invalid("jobs must be >= 1"));
        }
        let mut seen = HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::invalid(format!("seed {s} listed twice")));
        }
        let mut seen = HashSet::new();
        if let Some(f) = self.fractions.iter().find(|f| !seen.insert(f.to_bits())) {
            return Err(Error::invalid(format!("fraction {f} listed twice")));
        }
        for specs in [&self.teacher_specs, &self.student_specs] {
            let mut names = HashSet::new();
            for s in specs {
                s.validate()?;
                if s.registry() != Some(self.registry) {
                    return Err(Error::invalid(format!("{} is not in the {:?} registry", s.name, self.registry)));
                }
                if !names.insert(s.name.as_str()) {
                    return Err(Error::invalid(format!("architecture {} listed twice", s.name)));
                }
            }
        }
        self.train_config.validate()
    }
}

/// `train − val`; may be negative.
pub fn overfit_gap(train_accuracy: f64, val_accuracy: f64) -> Result<f64> {
    for (name, v) in [("train_accuracy", train_accuracy), ("val_accuracy", val_accuracy)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok(train_accuracy - val_accuracy)
}

/// `100 (student − teacher) / teacher`, in percent.
pub fn percent_increase(student_val: f64, teacher_val: f64) -> Result<f64> {
    if teacher_val.is_nan() || teacher_val <= 0.0 {
        return Err(Error::invalid(format!("teacher_val must be > 0, got {teacher_val}")));
    }
    Ok(100.0 * (student_val - teacher_val) / teacher_val)
}
