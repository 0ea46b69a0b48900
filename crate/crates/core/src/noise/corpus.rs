//! Corpus construction plans for the two simulation protocols.

use rand::Rng;

use super::NoiseError;
use crate::rng::stream;

/// One planned mix: which clean utterance meets which condition, and where
/// the noise excerpt starts.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub clean_utt_id: String,
    pub out_utt_id: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub noise_offset: usize,
}

/// Non-augmented protocol: each utterance drawn into exactly one condition,
/// uniformly and independently.
pub fn plan_nonaugmented(
    utterances: &[(String, usize)],
    noise_ids: &[String],
    noise_lens: &[usize],
    snrs_db: &[f64],
    seed: u64,
) -> Result<Vec<MixPlan>, NoiseError> {
    check_inputs(utterances, noise_ids, snrs_db)?;
    let mut rng = stream(seed, "noise/nonaug");
    let mut out = Vec::with_capacity(utterances.len());
    for (utt_id, _len) in utterances {
        let n = rng.gen_range(0..noise_ids.len());
        let s = rng.gen_range(0..snrs_db.len());
        let offset = rng.gen_range(0..noise_lens[n].max(1));
        out.push(MixPlan {
            clean_utt_id: utt_id.clone(),
            out_utt_id: format!("{utt_id}#{}@{}dB", noise_ids[n], snrs_db[s]),
            noise_id: noise_ids[n].clone(),
            snr_db: snrs_db[s],
            noise_offset: offset,
        });
    }
    Ok(out)
}

/// Augmented protocol: each utterance replicated across every condition
/// exactly once.
pub fn plan_augmented(
    utterances: &[(String, usize)],
    noise_ids: &[String],
    noise_lens: &[usize],
    snrs_db: &[f64],
    seed: u64,
) -> Result<Vec<MixPlan>, NoiseError> {
    check_inputs(utterances, noise_ids, snrs_db)?;
    let mut rng = stream(seed, "noise/aug");
    let mut out = Vec::with_capacity(utterances.len() * noise_ids.len() * snrs_db.len());
    for (utt_id, _len) in utterances {
        for (n, noise_id) in noise_ids.iter().enumerate() {
            for &snr in snrs_db {
                let offset = rng.gen_range(0..noise_lens[n].max(1));
                out.push(MixPlan {
                    clean_utt_id: utt_id.clone(),
                    out_utt_id: format!("{utt_id}#{noise_id}@{snr}dB"),
                    noise_id: noise_id.clone(),
                    snr_db: snr,
                    noise_offset: offset,
                });
            }
        }
    }
    Ok(out)
}

fn check_inputs(utterances: &[(String, usize)], noise_ids: &[String], snrs_db: &[f64]) -> Result<(), NoiseError> {
    if utterances.is_empty() {
        return Err(NoiseError::EmptyInput("utterance manifest"));
    }
    if noise_ids.is_empty() {
        return Err(NoiseError::EmptyInput("noise"));
    }
    if snrs_db.is_empty() {
        return Err(NoiseError::EmptyInput("snr"));
    }
    Ok(())
}
