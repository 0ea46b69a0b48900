//! Log-mel filterbank extraction: Hamming window, magnitude-squared
//! spectrum, triangular HTK-mel filters, natural log with a 1e-10 floor.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureError, Waveform};
use crate::autodiff::Tensor;

#[derive(Debug, Clone)]
pub struct LogMelConfig {
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub mel_bins: usize,
    pub fft_size: usize,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig { frame_len_ms: 25.0, frame_shift_ms: 10.0, mel_bins: 40, fft_size: 256 }
    }
}

pub const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency (Hz) of each triangular filter; used by callers to pick
/// probe tones and by tests as the independent oracle.
pub fn mel_center_frequencies(mel_bins: usize, sample_rate: u32) -> Vec<f64> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    (1..=mel_bins).map(|k| mel_to_hz(top * k as f64 / (mel_bins + 1) as f64)).collect()
}

fn filterbank(mel_bins: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..mel_bins + 2).map(|k| mel_to_hz(top * k as f64 / (mel_bins + 1) as f64)).collect();
    let n_bins = fft_size / 2 + 1;
    let hz_per_bin = sample_rate as f64 / fft_size as f64;
    let mut filters = vec![vec![0.0; n_bins]; mel_bins];
    for k in 0..mel_bins {
        let (lo, mid, hi) = (edges[k], edges[k + 1], edges[k + 2]);
        for b in 0..n_bins {
            let f = b as f64 * hz_per_bin;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            filters[k][b] = w;
        }
    }
    filters
}

fn samples_for_ms(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// T = 1 + floor((len - frame_len) / frame_shift) frames of
/// `ln(max(mel_energy, 1e-10))`.
pub fn extract_logmel(wave: &Waveform, cfg: &LogMelConfig) -> Result<Tensor, FeatureError> {
    let frame_len = samples_for_ms(cfg.frame_len_ms, wave.sample_rate);
    let frame_shift = samples_for_ms(cfg.frame_shift_ms, wave.sample_rate);
    if frame_len == 0 || frame_shift == 0 || cfg.mel_bins == 0 {
        return Err(FeatureError::BadConfig("frame length, shift and mel bins must be positive".into()));
    }
    if frame_len < frame_shift {
        return Err(FeatureError::BadConfig(format!("frame length {} samples shorter than shift {}", frame_len, frame_shift)));
    }
    if cfg.fft_size < frame_len {
        return Err(FeatureError::BadConfig(format!("fft size {} smaller than frame length {} samples", cfg.fft_size, frame_len)));
    }
    if wave.samples.len() < frame_len {
        return Err(FeatureError::TooShort { samples: wave.samples.len(), frame: frame_len });
    }

    let t_frames = 1 + (wave.samples.len() - frame_len) / frame_shift;
    let window: Vec<f64> = (0..frame_len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (frame_len - 1) as f64).cos())
        .collect();
    let filters = filterbank(cfg.mel_bins, cfg.fft_size, wave.sample_rate);

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let n_bins = cfg.fft_size / 2 + 1;

    let mut out = vec![0.0; t_frames * cfg.mel_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..t_frames {
        let start = t * frame_shift;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < frame_len {
                Complex::new(wave.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for (k, filter) in filters.iter().enumerate() {
            let energy: f64 = filter.iter().zip(&power).map(|(&w, &p)| w * p).sum();
            out[t * cfg.mel_bins + k] = energy.max(LOG_FLOOR).ln();
        }
    }
    Ok(Tensor::matrix(t_frames, cfg.mel_bins, out)?)
}
