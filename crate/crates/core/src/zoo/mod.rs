//! Architecture registry and model handles.
//!
//! Two registries share one engine. The desk registry holds three plain
//! convolutional nets (~50k / ~130k / ~350k parameters) that train on a
//! laptop CPU. The `paper` registry holds MobileNetV3-Large, ResNet-18 and
//! EfficientNet-B5 with a 10-way head; 32x32 inputs are fed natively with
//! the usual CIFAR stem (stride 1, and no max-pool for ResNet).

mod desk;
mod paper;
mod weights;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use weights::{load_weights, read_weights, save_weights, tensors_bytes, weights_bytes, WeightsFile};

use crate::dataset::{CHANNELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::nn::{Param, Sequential, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Registry {
    Paper,
    Desk,
}

struct Entry {
    name: &'static str,
    registry: Registry,
    tier: Tier,
    learning_rate: f64,
}

const ENTRIES: [Entry; 6] = [
    Entry {
        name: "desk-small",
        registry: Registry::Desk,
        tier: Tier::Small,
        learning_rate: desk::LEARNING_RATE,
    },
    Entry {
        name: "desk-medium",
        registry: Registry::Desk,
        tier: Tier::Medium,
        learning_rate: desk::LEARNING_RATE,
    },
    Entry {
        name: "desk-large",
        registry: Registry::Desk,
        tier: Tier::Large,
        learning_rate: desk::LEARNING_RATE,
    },
    Entry {
        name: "mobilenetv3-large",
        registry: Registry::Paper,
        tier: Tier::Small,
        learning_rate: 0.001,
    },
    Entry {
        name: "resnet-18",
        registry: Registry::Paper,
        tier: Tier::Medium,
        learning_rate: 0.01,
    },
    Entry {
        name: "efficientnet-b5",
        registry: Registry::Paper,
        tier: Tier::Large,
        learning_rate: 0.01,
    },
];

/// Names registered in `registry`, ordered small to large.
pub fn registered_names(registry: Registry) -> Vec<&'static str> {
    ENTRIES.iter().filter(|e| e.registry == registry).map(|e| e.name).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub tier: Tier,
    pub num_classes: usize,
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
    pub learning_rate: f64,
    /// Seed for the registry's initialisation scheme.
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    /// Registry defaults for `name` with a 10-way head.
    pub fn registered(name: &str) -> Result<Self> {
        let e = ENTRIES
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::UnknownArchitecture(name.to_string()))?;
        Ok(Self {
            name: e.name.to_string(),
            tier: e.tier,
            num_classes: crate::dataset::NUM_CLASSES,
            pretrained_weights: None,
            learning_rate: e.learning_rate,
            init_seed: 0,
        })
    }

    pub fn registry(&self) -> Option<Registry> {
        ENTRIES.iter().find(|e| e.name == self.name).map(|e| e.registry)
    }

    /// Registry default minibatch size.
    pub fn default_batch_size(&self) -> usize {
        match self.registry() {
            Some(Registry::Desk) => desk::BATCH_SIZE,
            _ => 128,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.registry().is_none() {
            return Err(Error::UnknownArchitecture(self.name.clone()));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// A built network: backbone `features` followed by a freshly initialised
/// classifier `head`.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub spec: ModelSpec,
    pub features: Sequential,
    pub head: Sequential,
    parameter_count: usize,
    /// Bumped by every optimizer step.
    pub state_version: u64,
}

pub fn build_model(spec: &ModelSpec) -> Result<ModelHandle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let (mut features, mut head) = match spec.name.as_str() {
        "desk-small" => desk::build(&mut rng, Tier::Small, spec.num_classes),
        "desk-medium" => desk::build(&mut rng, Tier::Medium, spec.num_classes),
        "desk-large" => desk::build(&mut rng, Tier::Large, spec.num_classes),
        "mobilenetv3-large" => paper::mobilenet_v3_large(&mut rng, spec.num_classes),
        "resnet-18" => paper::resnet18(&mut rng, spec.num_classes),
        "efficientnet-b5" => paper::efficientnet_b5(&mut rng, spec.num_classes),
        other => return Err(Error::UnknownArchitecture(other.to_string())),
    };
    features.assign_names("features");
    head.assign_names("head");
    let parameter_count = features.parameter_count() + head.parameter_count();
    let mut model = ModelHandle {
        spec: spec.clone(),
        features,
        head,
        parameter_count,
        state_version: 0,
    };
    if let Some(path) = &spec.pretrained_weights {
        let file = read_weights(path)?;
        model.load_backbone(&file)?;
    }
    Ok(model)
}

pub fn count_parameters(model: &ModelHandle) -> usize {
    model.parameter_count
}

impl ModelHandle {
    pub fn parameter_count(&self) -> usize {
        self.parameter_count
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn check_input(x: &Tensor) -> Result<()> {
        match x.shape() {
            [_, CHANNELS, IMAGE_SIDE, IMAGE_SIDE] => Ok(()),
            s => Err(Error::shape(format!("model input must be [N, 3, 32, 32], got {s:?}"))),
        }
    }

    fn check_output(&self, y: &Tensor) -> Result<()> {
        if !y.all_finite() {
            return Err(Error::NonFinite("model produced non-finite logits".into()));
        }
        match y.shape() {
            [_, c] if *c == self.spec.num_classes => Ok(()),
            s => Err(Error::shape(format!("model output {s:?} is not [N, {}]", self.spec.num_classes))),
        }
    }

    /// Evaluation-mode logits `[N, num_classes]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        let y = self.head.infer(&self.features.infer(x)?)?;
        self.check_output(&y)?;
        Ok(y)
    }

    /// Training-mode logits; caches activations for [`ModelHandle::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        let h = self.features.forward_train(x)?;
        let y = self.head.forward_train(&h)?;
        self.check_output(&y)?;
        Ok(y)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let g = self.head.backward(grad_logits)?;
        self.features.backward(&g)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.features.zero_grad();
        self.head.zero_grad();
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.features.visit(f);
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.features.visit_mut(f);
        self.head.visit_mut(f);
    }

    /// Copies every parameter and buffer from `file`.
    pub fn load_all(&mut self, file: &WeightsFile) -> Result<()> {
        load_weights(self, file, |_| true)
    }

    /// Copies backbone tensors only; the head stays as initialised.
    pub fn load_backbone(&mut self, file: &WeightsFile) -> Result<()> {
        load_weights(self, file, |name| !name.starts_with("head."))
    }

    /// Copies every value from `other`, which must share the architecture.
    pub fn copy_weights_from(&mut self, other: &ModelHandle) -> Result<()> {
        if other.spec.name != self.spec.name || other.spec.num_classes != self.spec.num_classes {
            return Err(Error::shape(format!("cannot copy {} weights into {}", other.spec.name, self.spec.name)));
        }
        let mut values = Vec::new();
        other.visit(&mut |p| values.push(p.value.clone()));
        let mut it = values.into_iter();
        self.visit_mut(&mut |p| p.value = it.next().expect("same architecture"));
        Ok(())
    }
}
