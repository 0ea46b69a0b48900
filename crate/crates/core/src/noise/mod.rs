//! Noise-corrupted corpus simulation with exact SNR control and seen/unseen
//! condition bookkeeping.
//!
//! Corpus construction is split into *planning* (pure: which utterance meets
//! which noise at which SNR and offset) and *rendering* (mixing waveforms
//! from a plan), so the sampling protocol can be tested without audio IO.

mod bank;
mod corpus;
mod mix;

pub use bank::{builtin_noise_bank, BUILTIN_NOISE_IDS};
pub use corpus::{plan_augmented, plan_nonaugmented, MixPlan};
pub use mix::{mix_at_snr, noise_segment, remeasure_snr, signal_power};

use std::collections::BTreeSet;

use thiserror::Error;

use crate::features::Waveform;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("zero-power clean signal: SNR undefined")]
    ZeroPowerClean,
    #[error("zero-power noise segment for noise {0:?}: SNR undefined")]
    ZeroPowerNoise(String),
    #[error("sample rate mismatch: clean {clean} Hz vs noise {noise} Hz")]
    SampleRateMismatch { clean: u32, noise: u32 },
    #[error("empty {0} set")]
    EmptyInput(&'static str),
}

/// Whether a noise type also occurs in the training simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseCategory {
    SeenInTraining,
    Unseen,
}

/// One noise source.
#[derive(Debug, Clone)]
pub struct NoiseProfile {
    pub noise_id: String,
    pub wave: Waveform,
    pub category: NoiseCategory,
}

/// A (noise type, SNR) condition set, e.g. the conditions used to simulate
/// the training data. SNRs are keyed at millidecibel granularity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConditionSet {
    conditions: BTreeSet<(String, i64)>,
}

fn snr_key(snr_db: f64) -> i64 {
    (snr_db * 1000.0).round() as i64
}

impl ConditionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cross(noise_ids: &[String], snrs_db: &[f64]) -> Self {
        let mut set = ConditionSet::new();
        for n in noise_ids {
            for &s in snrs_db {
                set.insert(n, s);
            }
        }
        set
    }

    pub fn insert(&mut self, noise_id: &str, snr_db: f64) {
        self.conditions.insert((noise_id.to_string(), snr_key(snr_db)));
    }

    pub fn contains(&self, noise_id: &str, snr_db: f64) -> bool {
        self.conditions.contains(&(noise_id.to_string(), snr_key(snr_db)))
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }
}

/// Provenance of one mixed utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    pub utterance_id: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub noise_offset: usize,
    /// The noise segment wrapped past the end of the noise recording.
    pub wrapped: bool,
    pub seed: u64,
}

/// A mixed utterance. `env_id` is derived from the condition.
#[derive(Debug, Clone)]
pub struct CorruptedUtterance {
    pub wave: Waveform,
    pub env_id: String,
    pub provenance: MixSpec,
    pub seen_flag: bool,
}

/// Environment identifier for a (noise, SNR) condition.
pub fn env_id_for(noise_id: &str, snr_db: f64) -> String {
    format!("{noise_id}@{snr_db}dB")
}
