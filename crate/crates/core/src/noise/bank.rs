//! Built-in synthetic noise bank.
//!
//! WHAM-style ambient audio is not redistributable, so ten seeded generators
//! stand in: broadband, colored, modulated, periodic and impulsive kinds.
//! Every generator keeps non-zero power over any mixing window (sparse kinds
//! carry a small broadband floor).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NoiseCategory, NoiseProfile};
use crate::features::Waveform;
use crate::rng::indexed_stream;

pub const BUILTIN_NOISE_IDS: [&str; 10] =
    ["white", "pink", "brown", "hum", "babble", "narrowband", "crackle", "chirp", "buzz", "rain"];

fn white(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
}

fn generate(noise_id: &str, len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let dt = 1.0 / sr;
    match noise_id {
        "white" => white(rng, len, 0.5),
        "pink" => {
            // cascade of leaky integrators over white noise
            let src = white(rng, len, 0.5);
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            src.iter()
                .map(|&w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    (b0 + b1 + b2 + w * 0.1848) * 0.2
                })
                .collect()
        }
        "brown" => {
            let mut acc = 0.0;
            (0..len)
                .map(|_| {
                    acc = 0.98 * acc + (rng.gen::<f64>() * 2.0 - 1.0) * 0.1;
                    acc
                })
                .collect()
        }
        "hum" => {
            let wobble: Vec<f64> = white(rng, len, 0.02);
            (0..len)
                .map(|i| {
                    let t = i as f64 * dt;
                    0.5 * (2.0 * std::f64::consts::PI * 50.0 * t).sin()
                        + 0.25 * (2.0 * std::f64::consts::PI * 100.0 * t).sin()
                        + 0.12 * (2.0 * std::f64::consts::PI * 150.0 * t).sin()
                        + wobble[i]
                })
                .collect()
        }
        "babble" => {
            // broadband noise under a slow multi-tone envelope
            let src = white(rng, len, 0.6);
            let (f1, f2, f3) = (rng.gen_range(1.5..3.5), rng.gen_range(4.0..7.0), rng.gen_range(0.4..1.2));
            src.iter()
                .enumerate()
                .map(|(i, &w)| {
                    let t = i as f64 * dt;
                    let env = 0.55
                        + 0.25 * (2.0 * std::f64::consts::PI * f1 * t).sin()
                        + 0.15 * (2.0 * std::f64::consts::PI * f2 * t).sin()
                        + 0.05 * (2.0 * std::f64::consts::PI * f3 * t).sin();
                    w * env
                })
                .collect()
        }
        "narrowband" => {
            let src = white(rng, len, 0.4);
            (0..len)
                .map(|i| {
                    let t = i as f64 * dt;
                    (2.0 * std::f64::consts::PI * 1000.0 * t).sin() * (0.4 + src[i].abs())
                })
                .collect()
        }
        "crackle" => {
            let floor = white(rng, len, 0.02);
            let mut out = floor;
            let mut i = 0;
            while i < len {
                i += rng.gen_range(40..400);
                if i < len {
                    out[i] += rng.gen_range(-1.0..1.0);
                }
            }
            out
        }
        "chirp" => {
            let period = sr; // one-second sweeps
            let floor = white(rng, len, 0.03);
            (0..len)
                .map(|i| {
                    let phase = (i as f64 % period) / period;
                    let f = 300.0 + 2700.0 * phase;
                    0.4 * (2.0 * std::f64::consts::PI * f * (i as f64 % period) * dt).sin() + floor[i]
                })
                .collect()
        }
        "buzz" => {
            let floor = white(rng, len, 0.02);
            (0..len)
                .map(|i| {
                    let t = i as f64 * dt;
                    let mut v = 0.0;
                    for h in [1.0, 3.0, 5.0, 7.0] {
                        v += (2.0 * std::f64::consts::PI * 120.0 * h * t).sin() / h;
                    }
                    0.3 * v + floor[i]
                })
                .collect()
        }
        "rain" => {
            // first difference of white noise: high-frequency tilt
            let src = white(rng, len + 1, 0.5);
            (0..len).map(|i| (src[i + 1] - src[i]) * 0.7).collect()
        }
        other => panic!("unknown builtin noise id {other:?}"),
    }
}

/// Generate the ten built-in noise profiles, `len` samples each. The first
/// `seen_types` ids are tagged as appearing in training.
pub fn builtin_noise_bank(len: usize, sample_rate: u32, seed: u64, seen_types: usize) -> Vec<NoiseProfile> {
    BUILTIN_NOISE_IDS
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let mut rng = indexed_stream(seed, "noise-bank", i as u64);
            let samples = generate(id, len, sample_rate, &mut rng);
            NoiseProfile {
                noise_id: id.to_string(),
                wave: Waveform::new(samples, sample_rate).expect("non-empty noise"),
                category: if i < seen_types { NoiseCategory::SeenInTraining } else { NoiseCategory::Unseen },
            }
        })
        .collect()
}
