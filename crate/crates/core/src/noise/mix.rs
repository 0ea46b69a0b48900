//! Power measurement and SNR-exact additive mixing.

use super::{env_id_for, ConditionSet, CorruptedUtterance, MixSpec, NoiseError, NoiseProfile};
use crate::features::Waveform;

/// Mean of squared amplitudes.
pub fn signal_power(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "signal_power of empty signal");
    samples.iter().map(|&s| s * s).sum::<f64>() / samples.len() as f64
}

/// Extract `len` noise samples starting at `offset`, wrapping around the end
/// of the recording when needed. Returns the segment and the wrap flag.
pub fn noise_segment(noise: &Waveform, offset: usize, len: usize) -> (Vec<f64>, bool) {
    let n = noise.samples.len();
    let wrapped = offset + len > n;
    let seg = (0..len).map(|i| noise.samples[(offset + i) % n]).collect();
    (seg, wrapped)
}

/// Mix `clean + g * noise_segment` with `g = sqrt(P_clean / (P_noise * 10^(snr/10)))`,
/// so the scaled-noise SNR of the output equals `spec.snr_db` exactly (up to
/// floating point).
pub fn mix_at_snr(
    clean: &Waveform,
    noise: &NoiseProfile,
    spec: &MixSpec,
    train_conditions: &ConditionSet,
) -> Result<CorruptedUtterance, NoiseError> {
    if clean.sample_rate != noise.wave.sample_rate {
        return Err(NoiseError::SampleRateMismatch { clean: clean.sample_rate, noise: noise.wave.sample_rate });
    }
    let p_clean = signal_power(&clean.samples);
    if p_clean <= 0.0 {
        return Err(NoiseError::ZeroPowerClean);
    }
    let (segment, wrapped) = noise_segment(&noise.wave, spec.noise_offset, clean.samples.len());
    let p_noise = signal_power(&segment);
    if p_noise <= 0.0 {
        return Err(NoiseError::ZeroPowerNoise(noise.noise_id.clone()));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    let samples: Vec<f64> = clean.samples.iter().zip(&segment).map(|(&c, &n)| c + gain * n).collect();
    let wave = Waveform { samples, sample_rate: clean.sample_rate };
    let provenance = MixSpec { wrapped, ..spec.clone() };
    let seen_flag = train_conditions.contains(&spec.noise_id, spec.snr_db);
    Ok(CorruptedUtterance { wave, env_id: env_id_for(&spec.noise_id, spec.snr_db), provenance, seen_flag })
}

/// Re-measure the clean-to-scaled-noise SNR of a mix by subtracting the
/// clean signal back out. Round-trips to the target within 0.01 dB.
pub fn remeasure_snr(clean: &Waveform, mixed: &CorruptedUtterance) -> f64 {
    let scaled: Vec<f64> = mixed.wave.samples.iter().zip(&clean.samples).map(|(&m, &c)| m - c).collect();
    10.0 * (signal_power(&clean.samples) / signal_power(&scaled)).log10()
}
