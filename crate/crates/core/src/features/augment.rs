//! Simplified SpecAugment-style masking: contiguous time and frequency
//! bands are filled with the per-utterance mean of the original frames.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureError;
use crate::autodiff::Tensor;

/// Mask counts and widths. Widths wider than the masked dimension cover the
/// whole dimension.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskSpec {
    pub time_masks: usize,
    pub time_width: usize,
    pub freq_masks: usize,
    pub freq_width: usize,
}

/// Apply masking to a (T, F) frame matrix. Zero-count masking is the
/// identity; output shape always equals input shape; deterministic under
/// `seed`.
pub fn spec_augment_mask(frames: &Tensor, spec: &MaskSpec, seed: u64) -> Result<Tensor, FeatureError> {
    let shape = frames.shape();
    if shape.len() != 2 {
        return Err(FeatureError::BadConfig(format!("expected (T,F) frames, got shape {shape:?}")));
    }
    let (t, f) = (shape[0], shape[1]);
    if (spec.time_masks == 0 || spec.time_width == 0) && (spec.freq_masks == 0 || spec.freq_width == 0) {
        return Ok(frames.clone());
    }

    let mean = frames.data().iter().sum::<f64>() / frames.numel() as f64;
    let mut data = frames.data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..spec.time_masks {
        let width = spec.time_width.min(t);
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=t - width);
        for row in start..start + width {
            for v in &mut data[row * f..(row + 1) * f] {
                *v = mean;
            }
        }
    }
    for _ in 0..spec.freq_masks {
        let width = spec.freq_width.min(f);
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=f - width);
        for row in 0..t {
            for v in &mut data[row * f + start..row * f + start + width] {
                *v = mean;
            }
        }
    }
    Ok(Tensor::matrix(t, f, data)?)
}
