//! Acoustic feature frontend: waveforms to log-mel feature sequences, plus
//! the masking used during training and the on-disk archive/manifest
//! formats.

mod archive;
mod augment;
mod logmel;
mod manifest;
mod waveio;

pub use archive::{load_archive, save_archive, FEATURE_ARCHIVE_VERSION};
pub use augment::{spec_augment_mask, MaskSpec};
pub use logmel::{extract_logmel, mel_center_frequencies, LogMelConfig};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use waveio::{read_waveform, write_waveform, WAVEFORM_FORMAT_VERSION};

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("waveform shorter than one frame ({samples} samples, frame is {frame} samples)")]
    TooShort { samples: usize, frame: usize },
    #[error("invalid frontend config: {0}")]
    BadConfig(String),
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {what} at line {line}: {reason}")]
    Malformed { what: &'static str, line: usize, reason: String },
    #[error("{0}")]
    Tensor(#[from] crate::autodiff::AdError),
}

/// Raw audio. Telephone-band material defaults to 8 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, FeatureError> {
        if samples.is_empty() {
            return Err(FeatureError::EmptyWaveform);
        }
        if sample_rate == 0 {
            return Err(FeatureError::BadConfig("sample_rate must be positive".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Time-major feature frames for one utterance together with the labels that
/// place it in its speaker-environment cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub speaker_id: String,
    pub env_id: String,
    /// (T, F) log-mel frames.
    pub frames: Tensor,
    /// Absent at test time.
    pub transcript: Option<String>,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}
