//! Rapid adaptation by reusing cached transforms.
//!
//! The cache holds conditional estimates keyed `owner|condition`: a speaker
//! transform estimated from that speaker's data in one environment, and an
//! environment transform estimated from that environment's data of one
//! speaker. Pairings then select matched or deliberately mismatched
//! conditions per utterance; no estimation happens at application time.

use rand::seq::SliceRandom;

use super::dataset::AdaptationDataset;
use super::estimate::{estimate_transforms, first_pass_decode, EstimationConfig, Supervision};
use super::testtime::{decode_with_values, values_from_params};
use super::transforms::TransformParams;
use super::{PipelineError, Result};
use crate::adapt::{AdaptationMode, CacheProvenance, FactorTransform, OwnerType, TransformCache, TransformValues};
use crate::autodiff::ParamStore;
use crate::model::{Conformer, DecodeParams, Hypothesis, TokenSequence};
use crate::rng::indexed_stream;

/// Cache key for a transform of `owner` estimated under `condition`.
pub fn conditional_owner_id(owner: &str, condition: &str) -> String {
    format!("{owner}|{condition}")
}

/// Estimate a factorised transform pair on every (speaker, env) cell
/// separately and cache the results under conditional keys. Pseudo labels
/// come from one shared first-pass decode.
pub fn build_conditional_cache(
    model: &Conformer,
    canonical: &ParamStore,
    dataset: &AdaptationDataset,
    est_cfg: &EstimationConfig,
    decode: &DecodeParams,
) -> Result<(TransformCache, Vec<(String, Hypothesis)>)> {
    if est_cfg.mode.speaker_kind().is_none() || est_cfg.mode.env_kind().is_none() {
        return Err(PipelineError::BadSpec("conditional cache needs a factorised mode with speaker and env transforms".into()));
    }
    let first_pass = first_pass_decode(model, canonical, dataset, decode)?;
    let labels: std::collections::HashMap<String, TokenSequence> =
        first_pass.iter().map(|(id, h)| (id.clone(), h.tokens.clone())).collect();

    let mut cache = TransformCache::new(
        model.cfg.model_dim,
        est_cfg.mode.speaker_kind(),
        est_cfg.mode.env_kind(),
        est_cfg.variational,
        CacheProvenance { corpus: "per-cell".to_string(), epochs: est_cfg.epochs, objective: 0.0 },
    );
    let mut objective_sum = 0.0;
    let mut cells = 0usize;
    for (speaker, env) in dataset.cell_keys() {
        let cell = dataset.restrict_to_cell(&speaker, &env)?;
        let mut store = canonical.clone();
        let (tp, outcome) = estimate_transforms(model, &mut store, &cell, est_cfg, Supervision::Given(&labels))?;
        objective_sum += outcome.objectives.last().copied().unwrap_or(f64::NAN);
        cells += 1;
        for t in tp.extract(&store)? {
            let conditioned = match t.owner_type {
                OwnerType::Speaker => conditional_owner_id(&t.owner_id, &env),
                OwnerType::Env => conditional_owner_id(&t.owner_id, &speaker),
                OwnerType::Joint => t.owner_id.clone(),
            };
            cache.insert(FactorTransform { owner_id: conditioned, ..t });
        }
    }
    cache.provenance.objective = objective_sum / cells.max(1) as f64;
    Ok((cache, first_pass))
}

/// Which cached conditions are deliberately wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    Matched,
    /// Speaker transform taken from a mismatched environment.
    MismatchedEnv,
    /// Environment transform taken from a mismatched speaker.
    MismatchedSpeaker,
    BothMismatched,
}

impl Pairing {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pairing::Matched => "matched",
            Pairing::MismatchedEnv => "mm-env",
            Pairing::MismatchedSpeaker => "mm-spk",
            Pairing::BothMismatched => "mm-both",
        }
    }
}

fn pick_other(rng: &mut rand_chacha::ChaCha8Rng, pool: &[String], own: &str) -> Result<String> {
    let others: Vec<&String> = pool.iter().filter(|x| x.as_str() != own).collect();
    others
        .choose(rng)
        .map(|s| s.to_string())
        .ok_or_else(|| PipelineError::BadSpec(format!("no mismatched condition available for {own:?}")))
}

/// Apply cached transforms under a pairing and decode. Mismatched pairings
/// pick a random wrong condition per utterance under the seed.
pub fn rapid_adapt_from_cache(
    model: &Conformer,
    canonical: &ParamStore,
    cache: &TransformCache,
    dataset: &AdaptationDataset,
    mode: AdaptationMode,
    pairing: Pairing,
    seed: u64,
    decode: &DecodeParams,
) -> Result<Vec<(String, Hypothesis)>> {
    mode.validate()?;
    let speakers = dataset.speakers();
    let envs = dataset.envs();
    let tp = TransformParams::for_dataset(mode, cache.variational, cache.dim, speakers.clone(), envs.clone())?;

    let utterances = dataset.utterances();
    // per-utterance condition selection is sequential and seeded; decoding
    // is the parallel part
    let mut selected: Vec<TransformValues> = Vec::with_capacity(utterances.len());
    for (i, u) in utterances.iter().enumerate() {
        let mut rng = indexed_stream(seed, "rapid/pairing", i as u64);
        let spk_cond = match pairing {
            Pairing::Matched | Pairing::MismatchedSpeaker => u.env_id.clone(),
            Pairing::MismatchedEnv | Pairing::BothMismatched => pick_other(&mut rng, &envs, &u.env_id)?,
        };
        let env_cond = match pairing {
            Pairing::Matched | Pairing::MismatchedEnv => u.speaker_id.clone(),
            Pairing::MismatchedSpeaker | Pairing::BothMismatched => pick_other(&mut rng, &speakers, &u.speaker_id)?,
        };
        let lookup = |ot: OwnerType, id: &str| -> Result<Vec<f64>> {
            let key = match ot {
                OwnerType::Speaker => conditional_owner_id(id, &spk_cond),
                OwnerType::Env => conditional_owner_id(id, &env_cond),
                OwnerType::Joint => id.to_string(),
            };
            let t = cache.get(ot, &key)?;
            Ok(t.posterior_mean_inference().point_vector().to_vec())
        };
        selected.push(tp.decode_values(&lookup, &u.speaker_id, &u.env_id)?);
    }

    use rayon::prelude::*;
    let out: Vec<Result<(String, Hypothesis)>> = utterances
        .par_iter()
        .zip(selected.par_iter())
        .map(|(u, values)| {
            let hyp = decode_with_values(model, canonical, &u.frames, values, decode)?;
            Ok((u.utterance_id.clone(), hyp))
        })
        .collect();
    out.into_iter().collect()
}

/// Matched application of union-estimated transforms through the cache path;
/// used to cross-check against `test_time_adapt`'s final decode.
pub fn decode_via_cache_matched(
    model: &Conformer,
    canonical: &ParamStore,
    tp: &TransformParams,
    transforms: &[FactorTransform],
    dataset: &AdaptationDataset,
    decode: &DecodeParams,
) -> Result<Vec<(String, Hypothesis)>> {
    let values_for = values_from_params(tp, transforms);
    super::testtime::decode_dataset_with(model, canonical, dataset, &values_for, decode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::TransformKind;
    use crate::model::{ModelConfig, Vocab};
    use crate::pipeline::synth::{generate_synthetic_corpus, SyntheticTaskSpec};
    use crate::pipeline::testtime::test_time_adapt;

    fn tiny_world() -> (Conformer, ParamStore, AdaptationDataset) {
        let mut spec = SyntheticTaskSpec::default_with(2, 2, 1, 8, "t");
        spec.feature_dim = 10;
        spec.tokens_per_utt = (3, 4);
        spec.alphabet = "abcd".into();
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let cfg = ModelConfig {
            feature_dim: 10,
            encoder_blocks: 1,
            decoder_blocks: 1,
            model_dim: 16,
            heads: 2,
            ff_dim: 24,
            conv_kernel: 3,
            subsample_channels: 4,
            vocab: Vocab::new("abcd").unwrap(),
            lambda_train: 0.2,
            lambda_decode: 0.3,
            dropout: 0.1,
            label_smoothing: 0.1,
        };
        let model = Conformer::new(cfg).unwrap();
        let mut store = ParamStore::new();
        model.init_params(&mut store, 5).unwrap();
        (model, store, corpus.dataset)
    }

    fn cfa() -> AdaptationMode {
        AdaptationMode::Cfa { spk: TransformKind::Hub, env: TransformKind::Hub }
    }

    #[test]
    fn cache_covers_every_cell_conditionally() {
        let (model, store, ds) = tiny_world();
        let mut est = EstimationConfig::new(cfa(), false, 3);
        est.epochs = 1;
        let decode = DecodeParams { beam: 1, lambda: 0.3, max_len: None };
        let (cache, _) = build_conditional_cache(&model, &store, &ds, &est, &decode).unwrap();
        // 2 speakers x 2 envs: one speaker entry per (s,e) and one env entry per (e,s)
        assert_eq!(cache.len(), 8);
        for (s, e) in ds.cell_keys() {
            assert!(cache.contains(OwnerType::Speaker, &conditional_owner_id(&s, &e)));
            assert!(cache.contains(OwnerType::Env, &conditional_owner_id(&e, &s)));
        }
    }

    #[test]
    fn matched_pairing_reproduces_union_decode_given_same_transforms() {
        let (model, store, ds) = tiny_world();
        let mut est = EstimationConfig::new(cfa(), false, 3);
        est.epochs = 2;
        let decode = DecodeParams { beam: 2, lambda: 0.3, max_len: None };
        let out = test_time_adapt(&model, &store, &ds, &est, &decode, None).unwrap();

        // cache the union-estimated transforms under every matched key
        let mut cache = TransformCache::new(model.cfg.model_dim, Some(TransformKind::Hub), Some(TransformKind::Hub), false, Default::default());
        for t in &out.transforms {
            for (s, e) in ds.cell_keys() {
                match t.owner_type {
                    OwnerType::Speaker if t.owner_id == s => {
                        cache.insert(FactorTransform { owner_id: conditional_owner_id(&s, &e), ..t.clone() });
                    }
                    OwnerType::Env if t.owner_id == e => {
                        cache.insert(FactorTransform { owner_id: conditional_owner_id(&e, &s), ..t.clone() });
                    }
                    _ => {}
                }
            }
        }
        let rapid = rapid_adapt_from_cache(&model, &store, &cache, &ds, cfa(), Pairing::Matched, 0, &decode).unwrap();
        assert_eq!(rapid.len(), out.adapted.len());
        for ((id1, h1), (id2, h2)) in rapid.iter().zip(&out.adapted) {
            assert_eq!(id1, id2);
            assert_eq!(h1, h2);
        }
    }

    #[test]
    fn missing_cache_key_is_reported_with_owner() {
        let (model, store, ds) = tiny_world();
        let cache = TransformCache::new(model.cfg.model_dim, Some(TransformKind::Hub), Some(TransformKind::Hub), false, Default::default());
        let decode = DecodeParams { beam: 1, lambda: 0.3, max_len: None };
        let err = rapid_adapt_from_cache(&model, &store, &cache, &ds, cfa(), Pairing::Matched, 0, &decode).unwrap_err();
        assert!(err.to_string().contains("missing a transform"), "{err}");
    }

    #[test]
    fn mismatched_selection_is_seeded() {
        let (model, store, ds) = tiny_world();
        let mut est = EstimationConfig::new(cfa(), false, 3);
        est.epochs = 1;
        let decode = DecodeParams { beam: 1, lambda: 0.3, max_len: None };
        let (cache, _) = build_conditional_cache(&model, &store, &ds, &est, &decode).unwrap();
        let a = rapid_adapt_from_cache(&model, &store, &cache, &ds, cfa(), Pairing::BothMismatched, 7, &decode).unwrap();
        let b = rapid_adapt_from_cache(&model, &store, &cache, &ds, cfa(), Pairing::BothMismatched, 7, &decode).unwrap();
        assert_eq!(a, b);
    }
}
