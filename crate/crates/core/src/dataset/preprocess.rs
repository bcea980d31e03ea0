use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSource, ImageView, CHANNELS, IMAGE_BYTES, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub normalize_mean: [f32; 3],
    pub normalize_std: [f32; 3],
    pub crop_pad: usize,
    pub flip_prob: f64,
    pub augment_enabled: bool,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            normalize_mean: [0.0; 3],
            normalize_std: [1.0; 3],
            crop_pad: 4,
            flip_prob: 0.5,
            augment_enabled: true,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.normalize_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("normalize_std must be positive, got {:?}", self.normalize_std)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!("flip_prob must be in [0, 1], got {}", self.flip_prob)));
        }
        if self.crop_pad >= IMAGE_SIDE {
            return Err(Error::invalid(format!("crop_pad {} too large for reflection", self.crop_pad)));
        }
        Ok(())
    }

    /// Per-channel mean and standard deviation of `ids` on the [0, 1] scale.
    pub fn from_train_stats(source: &DatasetSource, ids: &[usize]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("no images for normalisation statistics"));
        }
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut sum = [0u64; 3];
        let mut sq = [0u64; 3];
        for &id in ids {
            let img = source.image(id);
            for c in 0..CHANNELS {
                for &v in &img[c * plane..(c + 1) * plane] {
                    sum[c] += v as u64;
                    sq[c] += (v as u64) * (v as u64);
                }
            }
        }
        let n = (ids.len() * plane) as f64;
        let mut mean = [0f32; 3];
        let mut std = [1f32; 3];
        for c in 0..CHANNELS {
            let m = sum[c] as f64 / n;
            let var = (sq[c] as f64 / n - m * m).max(0.0);
            mean[c] = (m / 255.0) as f32;
            std[c] = ((var.sqrt() / 255.0) as f32).max(1e-6);
        }
        Ok(Self {
            normalize_mean: mean,
            normalize_std: std,
            ..Self::default()
        })
    }

    pub fn without_augmentation(&self) -> Self {
        Self {
            augment_enabled: false,
            ..self.clone()
        }
    }
}

/// Mixes a run seed, epoch and example id into a per-example rng state, so
/// augmentation draws do not depend on batch composition or thread count.
pub fn example_stream(seed: u64, epoch: u64, id: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn reflect(i: isize, n: isize) -> usize {
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Converts one CHW byte image into a standardized float image.
///
/// With augmentation on, the image is reflection-padded by `crop_pad`, a
/// random 32x32 window is taken and it is mirrored with `flip_prob`.
pub fn preprocess(image: &[u8], spec: &PreprocessSpec, rng_state: u64) -> Result<Vec<f32>> {
    if image.len() != IMAGE_BYTES {
        return Err(Error::shape(format!("expected {IMAGE_BYTES} image bytes, got {}", image.len())));
    }
    let mut out = vec![0f32; IMAGE_BYTES];
    preprocess_into(image, spec, rng_state, &mut out);
    Ok(out)
}

fn preprocess_into(image: &[u8], spec: &PreprocessSpec, rng_state: u64, out: &mut [f32]) {
    let side = IMAGE_SIDE as isize;
    let (dy, dx, flip) = if spec.augment_enabled {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_state);
        let span = 2 * spec.crop_pad as isize + 1;
        let dy = rng.gen_range(0..span) - spec.crop_pad as isize;
        let dx = rng.gen_range(0..span) - spec.crop_pad as isize;
        let flip = rng.gen::<f64>() < spec.flip_prob;
        (dy, dx, flip)
    } else {
        (0, 0, false)
    };
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    for c in 0..CHANNELS {
        let scale = 1.0 / (255.0 * spec.normalize_std[c]);
        let shift = spec.normalize_mean[c] / spec.normalize_std[c];
        let src = &image[c * plane..(c + 1) * plane];
        let dst = &mut out[c * plane..(c + 1) * plane];
        for y in 0..side {
            let sy = reflect(y + dy, side);
            for x in 0..side {
                let cx = if flip { side - 1 - x } else { x };
                let sx = reflect(cx + dx, side);
                dst[(y * side + x) as usize] = src[sy * IMAGE_SIDE + sx] as f32 * scale - shift;
            }
        }
    }
}

/// Preprocesses `ids` into one NCHW buffer. `streams[i]` is the rng state
/// for `ids[i]` and is ignored when augmentation is off.
pub fn preprocess_batch(
    images: ImageView<'_>,
    ids: &[usize],
    spec: &PreprocessSpec,
    streams: &[u64],
) -> Vec<f32> {
    assert_eq!(ids.len(), streams.len());
    let mut out = vec![0f32; ids.len() * IMAGE_BYTES];
    par::for_each_chunk_mut(&mut out, IMAGE_BYTES, |i, dst| {
        preprocess_into(images.image(ids[i]), spec, streams[i], dst);
    });
    out
}
