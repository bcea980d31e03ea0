//! Deterministic stand-in for CIFAR-10 with the same record layout.
//!
//! Each class is a shape family (disk, square, ring, stripes, ...) drawn at
//! a random position, scale and colour over a textured background, with
//! pixel noise and partial occlusion so that small labeled subsets overfit.
//! Colour carries only a weak class signal. Intended for tests, benches and
//! trying the CLI without the real archive.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetSource, IMAGE_BYTES, IMAGE_SIDE, NUM_CLASSES};
use crate::error::Result;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of additive pixel noise on the [0, 1] scale.
    pub noise: f32,
    /// Probability that a second, foreign shape is overlaid.
    pub distractor_prob: f64,
    /// Half-width of the random hue offset around each class's base hue.
    pub hue_jitter: f32,
    /// Amplitude of the background stripe texture in [0, 1].
    pub texture: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 50_000,
            test: 10_000,
            noise: 0.06,
            distractor_prob: 0.3,
            hue_jitter: 0.1,
            texture: 0.5,
        }
    }
}

/// Membership of `(u, v)` (shape-local coordinates, unit radius) in the
/// shape of `class`.
fn inside(class: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    let box_ = u.abs().max(v.abs());
    match class {
        0 => r < 1.0,
        1 => box_ < 0.85,
        2 => r < 1.0 && r > 0.55,
        3 => box_ < 0.95 && (v * 2.5 * PI).sin() > 0.0,
        4 => box_ < 0.95 && (u * 2.5 * PI).sin() > 0.0,
        5 => box_ < 1.0 && (u.abs() < 0.3 || v.abs() < 0.3),
        6 => v < 0.8 && v > -0.8 && u.abs() < (0.8 - v) * 0.6,
        7 => u.abs() + v.abs() < 1.0,
        8 => box_ < 0.95 && ((u * 2.0).floor() as i32 + (v * 2.0).floor() as i32).rem_euclid(2) == 0,
        _ => ((u - 0.5).powi(2) + v * v).sqrt() < 0.42 || ((u + 0.5).powi(2) + v * v).sqrt() < 0.42,
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f32;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Placement {
    cx: f32,
    cy: f32,
    scale: f32,
    cos: f32,
    sin: f32,
    color: [f32; 3],
}

impl Placement {
    fn draw(rng: &mut ChaCha8Rng, class: usize, scale: (f32, f32), jitter: f32) -> Self {
        let angle: f32 = rng.gen_range(-0.35..0.35);
        let hue = class as f32 / NUM_CLASSES as f32 + rng.gen_range(-jitter..=jitter);
        Self {
            cx: rng.gen_range(9.0..23.0),
            cy: rng.gen_range(9.0..23.0),
            scale: rng.gen_range(scale.0..scale.1),
            cos: angle.cos(),
            sin: angle.sin(),
            color: hsv(hue, rng.gen_range(0.3..1.0), rng.gen_range(0.45..1.0)),
        }
    }

    fn local(&self, x: f32, y: f32) -> (f32, f32) {
        let (dx, dy) = ((x - self.cx) / self.scale, (y - self.cy) / self.scale);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }
}

fn render(spec: &SyntheticSpec, class: usize, stream: u64, out: &mut [u8]) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0f32, spec.noise.max(1e-6)).expect("finite noise");
    let bg_a = hsv(rng.gen(), rng.gen_range(0.0..0.7), rng.gen_range(0.2..0.9));
    let bg_b = hsv(rng.gen(), rng.gen_range(0.0..0.7), rng.gen_range(0.2..0.9));
    let tex_freq: f32 = rng.gen_range(0.15..0.9);
    let tex_angle: f32 = rng.gen_range(0.0..PI);
    let tex_phase: f32 = rng.gen_range(0.0..2.0 * PI);
    let (ta, tb) = (tex_angle.cos(), tex_angle.sin());
    let main = Placement::draw(&mut rng, class, (5.0, 11.0), spec.hue_jitter);
    let distractor = (rng.gen::<f64>() < spec.distractor_prob).then(|| {
        let other = (class + rng.gen_range(1..NUM_CLASSES)) % NUM_CLASSES;
        (other, Placement::draw(&mut rng, other, (3.0, 6.0), spec.hue_jitter))
    });
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = 0.5 + 0.5 * spec.texture * ((fx * ta + fy * tb) * tex_freq + tex_phase).sin();
            let mut px = [0f32; 3];
            for c in 0..3 {
                px[c] = bg_a[c] * t + bg_b[c] * (1.0 - t);
            }
            let (u, v) = main.local(fx, fy);
            if inside(class, u, v) {
                px = main.color;
            }
            if let Some((other, d)) = &distractor {
                let (u, v) = d.local(fx, fy);
                if inside(*other, u, v) {
                    px = d.color;
                }
            }
            for c in 0..3 {
                let val = (px[c] + noise.sample(&mut rng)).clamp(0.0, 1.0);
                out[c * plane + y * IMAGE_SIDE + x] = (val * 255.0).round() as u8;
            }
        }
    }
}

fn render_set(spec: &SyntheticSpec, count: usize, offset: u64) -> (Vec<u8>, Vec<u8>) {
    let labels: Vec<u8> = (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6c61_6265_6c73);
            rng.set_stream(offset + i as u64);
            rng.gen_range(0..NUM_CLASSES) as u8
        })
        .collect();
    let mut images = vec![0u8; count * IMAGE_BYTES];
    par::for_each_chunk_mut(&mut images, IMAGE_BYTES, |i, img| {
        render(spec, labels[i] as usize, offset + i as u64, img)
    });
    (images, labels)
}

/// Generates a full source in memory.
pub fn generate(spec: &SyntheticSpec) -> Result<DatasetSource> {
    let (train_images, train_labels) = render_set(spec, spec.train, 0);
    let (test_images, test_labels) = render_set(spec, spec.test, 1 << 40);
    DatasetSource::from_parts(train_images, train_labels, test_images, test_labels)
}
