//! Two-pass unsupervised test-time adaptation: decode, estimate transforms
//! on the pseudo labels, decode again with the posterior-mean transforms.

use std::collections::HashMap;

use rayon::prelude::*;

use super::dataset::AdaptationDataset;
use super::estimate::{estimate_transforms, first_pass_decode, EstimationConfig, EstimationOutcome, Supervision};
use super::transforms::TransformParams;
use super::Result;
use crate::adapt::{FactorTransform, OwnerType, TransformValues};
use crate::autodiff::{ParamStore, Tensor};
use crate::model::{decode_utterance, Conformer, DecodeParams, EncodedUtterance, Hypothesis, TokenSequence};

#[derive(Debug, Clone)]
pub struct TestTimeOutcome {
    pub first_pass: Vec<(String, Hypothesis)>,
    pub adapted: Vec<(String, Hypothesis)>,
    pub transforms: Vec<FactorTransform>,
    pub estimation: EstimationOutcome,
}

/// Decode one utterance with concrete transform values applied at the
/// subsampling output.
pub fn decode_with_values(model: &Conformer, store: &ParamStore, frames: &Tensor, values: &TransformValues, decode: &DecodeParams) -> Result<Hypothesis> {
    let mut hook = |g: &mut crate::autodiff::Graph, h: crate::autodiff::NodeId| {
        values.apply(g, h).map_err(|e| crate::autodiff::AdError::Invalid(e.to_string()))
    };
    let encoded = EncodedUtterance::compute(model, store, frames, Some(&mut hook))?;
    Ok(decode_utterance(model, store, &encoded, decode)?)
}

/// Decode every utterance of a dataset under per-utterance transform values
/// selected by `values_for(speaker, env)`.
pub fn decode_dataset_with(
    model: &Conformer,
    store: &ParamStore,
    dataset: &AdaptationDataset,
    values_for: &(dyn Fn(&str, &str) -> Result<TransformValues> + Sync),
    decode: &DecodeParams,
) -> Result<Vec<(String, Hypothesis)>> {
    let utterances = dataset.utterances();
    let out: Vec<Result<(String, Hypothesis)>> = utterances
        .par_iter()
        .map(|u| {
            let values = values_for(&u.speaker_id, &u.env_id)?;
            let hyp = decode_with_values(model, store, &u.frames, &values, decode)?;
            Ok((u.utterance_id.clone(), hyp))
        })
        .collect();
    out.into_iter().collect()
}

/// Posterior-mean transform values per (speaker, env) from an estimated
/// transform set.
pub fn values_from_params<'a>(
    tp: &'a TransformParams,
    transforms: &'a [FactorTransform],
) -> impl Fn(&str, &str) -> Result<TransformValues> + Sync + 'a {
    move |speaker: &str, env: &str| {
        let lookup = |ot: OwnerType, id: &str| -> Result<Vec<f64>> {
            let t = transforms
                .iter()
                .find(|t| t.owner_type == ot && t.owner_id == id)
                .ok_or_else(|| crate::adapt::AdaptError::MissingCacheKey { owner_type: ot.as_str(), owner_id: id.to_string() })?;
            Ok(t.posterior_mean_inference().point_vector().to_vec())
        };
        tp.decode_values(&lookup, speaker, env)
    }
}

/// The full unsupervised pipeline. Test utterances carry (speaker, env)
/// labels; their transcripts are never read. The canonical store is cloned
/// internally, so the caller's parameters are untouched.
pub fn test_time_adapt(
    model: &Conformer,
    canonical: &ParamStore,
    dataset: &AdaptationDataset,
    est_cfg: &EstimationConfig,
    decode: &DecodeParams,
    supervision: Option<&HashMap<String, TokenSequence>>,
) -> Result<TestTimeOutcome> {
    let mut store = canonical.clone();
    let first_pass = first_pass_decode(model, &store, dataset, decode)?;
    let labels: HashMap<String, TokenSequence> = match supervision {
        Some(map) => map.clone(),
        None => first_pass.iter().map(|(id, hyp)| (id.clone(), hyp.tokens.clone())).collect(),
    };
    let (tp, estimation) = estimate_transforms(model, &mut store, dataset, est_cfg, Supervision::Given(&labels))?;
    let transforms: Vec<FactorTransform> = tp.extract(&store)?.into_iter().map(|t| t.posterior_mean_inference()).collect();

    let adapted = {
        let values_for = values_from_params(&tp, &transforms);
        decode_dataset_with(model, &store, dataset, &values_for, decode)?
    };
    Ok(TestTimeOutcome { first_pass, adapted, transforms, estimation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{AdaptationMode, TransformKind};
    use crate::model::{ModelConfig, Vocab};
    use crate::pipeline::synth::{generate_synthetic_corpus, SyntheticTaskSpec};

    fn tiny_world() -> (Conformer, ParamStore, AdaptationDataset) {
        let mut spec = SyntheticTaskSpec::default_with(2, 2, 1, 4, "t");
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

    #[test]
    fn identity_pinned_pipeline_reproduces_first_pass() {
        let (model, store, ds) = tiny_world();
        let mut est = EstimationConfig::new(AdaptationMode::Cfa { spk: TransformKind::Hub, env: TransformKind::Hub }, false, 9);
        est.epochs = 0; // transforms stay at identity
        let decode = DecodeParams { beam: 2, lambda: 0.3, max_len: None };
        let out = test_time_adapt(&model, &store, &ds, &est, &decode, None).unwrap();
        assert_eq!(out.first_pass.len(), out.adapted.len());
        for ((id1, h1), (id2, h2)) in out.first_pass.iter().zip(&out.adapted) {
            assert_eq!(id1, id2);
            assert_eq!(h1.tokens, h2.tokens);
            assert_eq!(h1.score, h2.score);
        }
    }

    #[test]
    fn given_supervision_equal_to_pseudo_labels_is_identical() {
        let (model, store, ds) = tiny_world();
        let mut est = EstimationConfig::new(AdaptationMode::SpeakerOnly { kind: TransformKind::Hub }, false, 9);
        est.epochs = 2;
        let decode = DecodeParams { beam: 1, lambda: 0.3, max_len: None };
        let pseudo = test_time_adapt(&model, &store, &ds, &est, &decode, None).unwrap();
        let labels: HashMap<String, TokenSequence> = pseudo.first_pass.iter().map(|(id, h)| (id.clone(), h.tokens.clone())).collect();
        let given = test_time_adapt(&model, &store, &ds, &est, &decode, Some(&labels)).unwrap();
        assert_eq!(pseudo.adapted.len(), given.adapted.len());
        for ((_, h1), (_, h2)) in pseudo.adapted.iter().zip(&given.adapted) {
            assert_eq!(h1, h2);
        }
    }

    #[test]
    fn caller_store_is_untouched() {
        let (model, store, ds) = tiny_world();
        let before = store.checksum("");
        let mut est = EstimationConfig::new(AdaptationMode::EnvOnly { kind: TransformKind::Lhuc }, true, 9);
        est.epochs = 1;
        let decode = DecodeParams { beam: 1, lambda: 0.3, max_len: None };
        let _ = test_time_adapt(&model, &store, &ds, &est, &decode, None).unwrap();
        assert_eq!(before, store.checksum(""));
    }
}
