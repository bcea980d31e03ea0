//! Desk-scale plain convolutional nets.
//!
//! Three conv/ReLU/max-pool stages (32 -> 16 -> 8 -> 4), a hidden dense
//! layer and the linear head. Widths are chosen so that parameter counts sit
//! near 50k / 130k / 355k, a 1 : 2.6 : 7.1 ladder.

use rand::Rng;

use super::Tier;
use crate::nn::{ActKind, Activation, Conv2d, Flatten, Layer, Linear, MaxPool2d, Sequential};

/// Learning rate shared by all desk tiers. With a few hundred labeled images
/// and ten epochs the `paper`-registry rates take too few steps to leave chance.
pub const LEARNING_RATE: f64 = 0.02;
/// Desk-tier minibatch size, for the same reason.
pub const BATCH_SIZE: usize = 32;

/// (stage widths, hidden units)
fn widths(tier: Tier) -> ([usize; 3], usize) {
    match tier {
        Tier::Small => ([8, 16, 32], 84),
        Tier::Medium => ([12, 24, 48], 150),
        Tier::Large => ([16, 32, 64], 320),
    }
}

pub(super) fn build(rng: &mut impl Rng, tier: Tier, classes: usize) -> (Sequential, Sequential) {
    let (w, hidden) = widths(tier);
    let mut features = Sequential::default();
    let mut c_in = 3;
    for &c in &w {
        features.push(Layer::Conv(Conv2d::new(rng, c_in, c, 3, 1, 1, 1, true)));
        features.push(Layer::Act(Activation::new(ActKind::Relu)));
        features.push(Layer::MaxPool(MaxPool2d::default()));
        c_in = c;
    }
    features.push(Layer::Flatten(Flatten::default()));
    features.push(Layer::Linear(Linear::new(rng, c_in * 4 * 4, hidden)));
    features.push(Layer::Act(Activation::new(ActKind::Relu)));
    let head = Sequential::new(vec![Layer::Linear(Linear::new(rng, hidden, classes))]);
    (features, head)
}
