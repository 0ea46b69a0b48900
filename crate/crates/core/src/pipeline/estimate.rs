//! Test-time transform estimation over adaptation-data unions.
//!
//! The canonical parameters stay frozen; only transform parameters move.
//! Full-batch gradient descent with backtracking keeps the objective
//! non-increasing across epochs. The Bayesian variant adds the closed-form
//! KL to the priors, scaled by one over the adaptation token count, and
//! draws its reparameterisation noise once per run so the objective stays
//! deterministic.

use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::dataset::AdaptationDataset;
use super::train::loss_sum_node;
use super::transforms::{EpsMap, TransformParams};
use super::{PipelineError, Result};
use crate::adapt::{kl_node, kl_to_prior, AdaptationMode, PriorSpec, TransformKind};
use crate::autodiff::{gd_rollback, gd_step, Graph, GraphMode, ParamStore};
use crate::features::FeatureSequence;
use crate::model::{decode_utterance, Conformer, DecodeParams, EncodedUtterance, TokenSequence};
use crate::rng::stream;

#[derive(Debug, Clone)]
pub struct EstimationConfig {
    pub mode: AdaptationMode,
    pub variational: bool,
    pub epochs: usize,
    pub lambda: f64,
    /// Monte Carlo samples per objective evaluation (K).
    pub samples: usize,
    pub seed: u64,
    /// Prior deviations per kind.
    pub lhuc_prior_dev: f64,
    pub hub_prior_dev: f64,
    /// Posterior deviation initialisation per kind.
    pub lhuc_dev_init: f64,
    pub hub_dev_init: f64,
    /// Multiplier on the KL term; 1.0 is the variational bound.
    pub kl_weight: f64,
    pub initial_lr: f64,
    pub max_backtracks: usize,
}

impl EstimationConfig {
    pub fn new(mode: AdaptationMode, variational: bool, seed: u64) -> Self {
        EstimationConfig {
            mode,
            variational,
            epochs: 3,
            lambda: 0.2,
            samples: 1,
            seed,
            lhuc_prior_dev: 1.0,
            hub_prior_dev: 0.0316227766016838,
            lhuc_dev_init: 0.1,
            hub_dev_init: 0.001,
            kl_weight: 1.0,
            initial_lr: 1.0,
            max_backtracks: 20,
        }
    }

    fn prior_for(&self, kind: TransformKind, dim: usize) -> crate::adapt::Result<PriorSpec> {
        match kind {
            TransformKind::Lhuc => PriorSpec::isotropic(dim, 0.0, self.lhuc_prior_dev),
            TransformKind::Hub => PriorSpec::isotropic(dim, 0.0, self.hub_prior_dev),
        }
    }
}

/// Where the estimation targets come from.
pub enum Supervision<'a> {
    /// Reference transcripts supplied by the caller.
    Given(&'a HashMap<String, TokenSequence>),
    /// First-pass decode of the un-adapted baseline model.
    Pseudo { decode: DecodeParams },
}

#[derive(Debug, Clone, Default)]
pub struct EstimationOutcome {
    /// Objective before each accepted epoch, plus the final value.
    pub objectives: Vec<f64>,
    pub epochs_run: usize,
    /// Labels actually used (pseudo labels when supervision was `Pseudo`).
    pub labels: HashMap<String, TokenSequence>,
}

/// Fixed per-run reparameterisation draws: sample index -> owner prefix ->
/// standard normal vector.
pub type EpsDraws = Vec<EpsMap>;

fn draw_eps(tp: &TransformParams, cfg: &EstimationConfig) -> EpsDraws {
    let mut draws = Vec::with_capacity(cfg.samples);
    for k in 0..cfg.samples {
        let mut map = EpsMap::new();
        for (ot, id, _) in tp.owner_entries() {
            let prefix = format!("adapt/{}/{}", ot.as_str(), id);
            let mut rng = stream(cfg.seed, &format!("estimate/eps/k{k}/{prefix}"));
            let v: Vec<f64> = (0..tp.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            map.insert(prefix, v);
        }
        draws.push(map);
    }
    draws
}

struct Labeled<'a> {
    utt: &'a FeatureSequence,
    reference: TokenSequence,
}

/// Token-normalized objective: `sum_k data_sum(theta_k) / (K * N) +
/// kl_weight * KL / N`. With `grads` set, gradients (same scaling) are
/// accumulated into the store.
fn objective(
    model: &Conformer,
    store: &mut ParamStore,
    labeled: &[Labeled<'_>],
    tp: &TransformParams,
    eps: Option<&EpsDraws>,
    cfg: &EstimationConfig,
    grads: bool,
) -> Result<f64> {
    let tokens: usize = labeled.iter().map(|l| l.reference.len() + 1).sum();
    let tokens = tokens.max(1) as f64;
    let k_count = eps.map_or(1, |d| d.len().max(1));

    let mut data_sum = 0.0;
    if grads {
        store.zero_grads();
        for k in 0..k_count {
            let eps_k = eps.map(|d| &d[k]);
            for l in labeled {
                let mut g = Graph::new(GraphMode::Eval);
                let h = model.subsample(&mut g, store, &l.utt.frames)?;
                let h = tp.apply(&mut g, store, h, &l.utt.speaker_id, &l.utt.env_id, eps_k)?;
                let enc = model.encoder_stack(&mut g, store, h)?;
                let (loss, _) = loss_sum_node(model, &mut g, store, enc, &l.reference, cfg.lambda)?;
                data_sum += g.scalar_value(loss);
                let gmap = g.backward(loss)?;
                store.accumulate_grads(&gmap, 1.0)?;
            }
        }
        let scale = 1.0 / (k_count as f64 * tokens);
        for p in store.iter_mut() {
            for v in p.grad.data_mut() {
                *v *= scale;
            }
        }
    } else {
        // objective-only evaluations parallelize per utterance
        let store_ro: &ParamStore = store;
        let jobs: Vec<(usize, usize)> = (0..k_count).flat_map(|k| (0..labeled.len()).map(move |i| (k, i))).collect();
        let values: Vec<Result<f64>> = jobs
            .par_iter()
            .map(|&(k, i)| {
                let l = &labeled[i];
                let eps_k = eps.map(|d| &d[k]);
                let mut g = Graph::new(GraphMode::Eval);
                let h = model.subsample(&mut g, store_ro, &l.utt.frames)?;
                let h = tp.apply(&mut g, store_ro, h, &l.utt.speaker_id, &l.utt.env_id, eps_k)?;
                let enc = model.encoder_stack(&mut g, store_ro, h)?;
                let (loss, _) = loss_sum_node(model, &mut g, store_ro, enc, &l.reference, cfg.lambda)?;
                Ok(g.scalar_value(loss))
            })
            .collect();
        for v in values {
            data_sum += v?;
        }
    }
    let mut total = data_sum / (k_count as f64 * tokens);

    if tp.variational && cfg.kl_weight != 0.0 {
        let kl = kl_total(store, tp, cfg, grads, cfg.kl_weight / tokens)?;
        total += cfg.kl_weight * kl / tokens;
    }
    Ok(total)
}

/// Sum of the independent per-owner KL terms. With `grads`, each term's
/// gradients are accumulated into the store scaled by `grad_scale`.
fn kl_total(store: &mut ParamStore, tp: &TransformParams, cfg: &EstimationConfig, grads: bool, grad_scale: f64) -> Result<f64> {
    let mut total = 0.0;
    for (ot, id, kind) in tp.owner_entries() {
        let prefix = format!("adapt/{}/{}", ot.as_str(), id);
        let prior = cfg.prior_for(kind, tp.dim)?;
        if grads {
            let mut g = Graph::new(GraphMode::Eval);
            let mu = g.param(store, &format!("{prefix}/mu"))?;
            let logdev = g.param(store, &format!("{prefix}/logdev"))?;
            let kl = kl_node(&mut g, mu, logdev, &prior)?;
            total += g.scalar_value(kl);
            let gmap = g.backward(kl)?;
            store.accumulate_grads(&gmap, grad_scale)?;
        } else {
            let mean = store.value(&format!("{prefix}/mu"))?.data().to_vec();
            let dev: Vec<f64> = store.value(&format!("{prefix}/logdev"))?.data().iter().map(|l| l.exp()).collect();
            total += kl_to_prior(&mean, &dev, &prior.mean, &prior.dev)?;
        }
    }
    Ok(total)
}

/// Public objective evaluation at the current parameter values (no gradient
/// side effects).
pub fn objective_value(
    model: &Conformer,
    store: &mut ParamStore,
    dataset: &AdaptationDataset,
    labels: &HashMap<String, TokenSequence>,
    tp: &TransformParams,
    eps: Option<&EpsDraws>,
    cfg: &EstimationConfig,
) -> Result<f64> {
    let labeled = collect_labeled(dataset, labels);
    objective(model, store, &labeled, tp, eps, cfg, false)
}

fn collect_labeled<'a>(dataset: &'a AdaptationDataset, labels: &HashMap<String, TokenSequence>) -> Vec<Labeled<'a>> {
    dataset
        .utterances()
        .into_iter()
        .filter_map(|u| {
            labels.get(&u.utterance_id).and_then(|r| if r.is_empty() { None } else { Some(Labeled { utt: u, reference: r.clone() }) })
        })
        .collect()
}

/// First-pass decode of the un-adapted model, used both for pseudo labels
/// and as the comparison baseline.
pub fn first_pass_decode(model: &Conformer, store: &ParamStore, dataset: &AdaptationDataset, decode: &DecodeParams) -> Result<Vec<(String, crate::model::Hypothesis)>> {
    let utterances = dataset.utterances();
    let hyps: Vec<Result<(String, crate::model::Hypothesis)>> = utterances
        .par_iter()
        .map(|u| {
            let encoded = EncodedUtterance::compute(model, store, &u.frames, None)?;
            let hyp = decode_utterance(model, store, &encoded, decode)?;
            Ok((u.utterance_id.clone(), hyp))
        })
        .collect();
    hyps.into_iter().collect()
}

/// Estimate transforms for every speaker and environment present in the
/// adaptation data. Canonical parameters are frozen: only `adapt/`
/// parameters are stepped, and a checksum guard verifies it.
pub fn estimate_transforms(
    model: &Conformer,
    store: &mut ParamStore,
    dataset: &AdaptationDataset,
    cfg: &EstimationConfig,
    supervision: Supervision<'_>,
) -> Result<(TransformParams, EstimationOutcome)> {
    cfg.mode.validate()?;
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut tp = TransformParams::for_dataset(cfg.mode, cfg.variational, model.cfg.model_dim, dataset.speakers(), dataset.envs())?;
    tp.lhuc_dev_init = cfg.lhuc_dev_init;
    tp.hub_dev_init = cfg.hub_dev_init;
    tp.register(store)?;

    let labels: HashMap<String, TokenSequence> = match supervision {
        Supervision::Given(map) => map.clone(),
        Supervision::Pseudo { decode } => first_pass_decode(model, store, dataset, &decode)?
            .into_iter()
            .map(|(id, hyp)| (id, hyp.tokens))
            .collect(),
    };
    let labeled = collect_labeled(dataset, &labels);
    if labeled.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }

    let checksum_before = store.checksum("model/");
    let eps = if cfg.variational { Some(draw_eps(&tp, cfg)) } else { None };
    let ids = tp.param_ids();

    let mut outcome = EstimationOutcome { labels: labels.clone(), ..Default::default() };
    let mut lr = cfg.initial_lr;
    let mut current = objective(model, store, &labeled, &tp, eps.as_ref(), cfg, false)?;
    outcome.objectives.push(current);

    for _epoch in 0..cfg.epochs {
        objective(model, store, &labeled, &tp, eps.as_ref(), cfg, true)?;
        let mut accepted = false;
        for _try in 0..cfg.max_backtracks {
            let saved = gd_step(store, &ids, lr);
            let candidate = objective(model, store, &labeled, &tp, eps.as_ref(), cfg, false)?;
            if candidate <= current {
                current = candidate;
                lr = (lr * 1.5).min(64.0);
                accepted = true;
                break;
            }
            gd_rollback(store, saved);
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
        outcome.objectives.push(current);
        outcome.epochs_run += 1;
    }

    debug_assert_eq!(checksum_before, store.checksum("model/"));
    if checksum_before != store.checksum("model/") {
        return Err(PipelineError::BadSpec("canonical parameters changed during estimation".into()));
    }
    Ok((tp, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Vocab};
    use crate::pipeline::synth::{generate_synthetic_corpus, SyntheticTaskSpec};

    fn tiny_world() -> (Conformer, ParamStore, AdaptationDataset) {
        let mut spec = SyntheticTaskSpec::default_with(2, 2, 2, 3, "t");
        spec.feature_dim = 10;
        spec.tokens_per_utt = (3, 5);
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

    fn given_labels(model: &Conformer, ds: &AdaptationDataset) -> HashMap<String, TokenSequence> {
        ds.utterances()
            .into_iter()
            .map(|u| (u.utterance_id.clone(), model.cfg.vocab.encode(u.transcript.as_ref().unwrap()).unwrap()))
            .collect()
    }

    #[test]
    fn zero_epochs_keeps_identity_and_canonical_frozen() {
        let (model, mut store, ds) = tiny_world();
        let labels = given_labels(&model, &ds);
        let before = store.checksum("model/");
        let mut cfg = EstimationConfig::new(AdaptationMode::Cfa { spk: TransformKind::Hub, env: TransformKind::Hub }, false, 1);
        cfg.epochs = 0;
        let (tp, outcome) = estimate_transforms(&model, &mut store, &ds, &cfg, Supervision::Given(&labels)).unwrap();
        assert_eq!(outcome.epochs_run, 0);
        assert_eq!(before, store.checksum("model/"));
        for t in tp.extract(&store).unwrap() {
            assert!(t.point_vector().iter().all(|&v| v == 0.0), "{} not identity", t.owner_id);
        }
    }

    #[test]
    fn objective_is_monotone_non_increasing_and_canonical_unchanged() {
        let (model, mut store, ds) = tiny_world();
        let labels = given_labels(&model, &ds);
        let before = store.checksum("model/");
        let mut cfg = EstimationConfig::new(AdaptationMode::Cfa { spk: TransformKind::Hub, env: TransformKind::Hub }, false, 1);
        cfg.epochs = 4;
        let (_tp, outcome) = estimate_transforms(&model, &mut store, &ds, &cfg, Supervision::Given(&labels)).unwrap();
        assert!(outcome.objectives.len() >= 2, "no steps accepted");
        for w in outcome.objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective rose: {:?}", outcome.objectives);
        }
        assert!(outcome.objectives.last().unwrap() < outcome.objectives.first().unwrap());
        assert_eq!(before, store.checksum("model/"));
    }

    #[test]
    fn bayesian_with_tiny_dev_and_no_kl_matches_deterministic() {
        let (model, mut store, ds) = tiny_world();
        let labels = given_labels(&model, &ds);
        let mode = AdaptationMode::SpeakerOnly { kind: TransformKind::Hub };

        let mut det_cfg = EstimationConfig::new(mode, false, 1);
        det_cfg.epochs = 0;
        let (det_tp, _) = estimate_transforms(&model, &mut store, &ds, &det_cfg, Supervision::Given(&labels)).unwrap();
        let det = objective_value(&model, &mut store, &ds, &labels, &det_tp, None, &det_cfg).unwrap();

        let mut var_store = {
            let (model2, store2, _) = tiny_world();
            let _ = model2;
            store2
        };
        let mut var_cfg = EstimationConfig::new(mode, true, 1);
        var_cfg.epochs = 0;
        var_cfg.kl_weight = 0.0;
        var_cfg.hub_dev_init = 1e-12;
        var_cfg.lhuc_dev_init = 1e-12;
        let (var_tp, _) = estimate_transforms(&model, &mut var_store, &ds, &var_cfg, Supervision::Given(&labels)).unwrap();
        let eps = draw_eps(&var_tp, &var_cfg);
        let bayes = objective_value(&model, &mut var_store, &ds, &labels, &var_tp, Some(&eps), &var_cfg).unwrap();
        assert!((bayes - det).abs() < 1e-6, "bayes {bayes} det {det}");
    }

    #[test]
    fn kl_component_decomposes_over_independent_posteriors() {
        let (model, mut store, ds) = tiny_world();
        let mut cfg = EstimationConfig::new(AdaptationMode::Cfa { spk: TransformKind::Lhuc, env: TransformKind::Hub }, true, 2);
        cfg.epochs = 0;
        let labels = given_labels(&model, &ds);
        let (tp, _) = estimate_transforms(&model, &mut store, &ds, &cfg, Supervision::Given(&labels)).unwrap();
        // nudge the posteriors off their init
        for id in tp.param_ids() {
            if id.ends_with("/mu") {
                let mut t = store.value(&id).unwrap().clone();
                t.data_mut()[0] = 0.3;
                store.set_value(&id, t).unwrap();
            }
        }
        let total = kl_total(&mut store, &tp, &cfg, false, 0.0).unwrap();
        let mut expected = 0.0;
        for (ot, id, kind) in tp.owner_entries() {
            let prefix = format!("adapt/{}/{}", ot.as_str(), id);
            let mean = store.value(&format!("{prefix}/mu")).unwrap().data().to_vec();
            let dev: Vec<f64> = store.value(&format!("{prefix}/logdev")).unwrap().data().iter().map(|l| l.exp()).collect();
            let prior = cfg.prior_for(kind, tp.dim).unwrap();
            expected += kl_to_prior(&mean, &dev, &prior.mean, &prior.dev).unwrap();
        }
        assert_eq!(total, expected);
    }

    #[test]
    fn estimator_variance_shrinks_with_more_samples() {
        let (model, mut store, ds) = tiny_world();
        // one cell is enough; take two utterances
        let utts: Vec<crate::features::FeatureSequence> = ds.utterances().into_iter().take(2).cloned().collect();
        let small = AdaptationDataset::from_features(utts).unwrap();
        let labels = given_labels(&model, &small);
        let mut cfg = EstimationConfig::new(AdaptationMode::SpeakerOnly { kind: TransformKind::Hub }, true, 7);
        cfg.epochs = 0;
        cfg.hub_dev_init = 0.3; // wide posterior so sampling noise is visible
        let (tp, _) = estimate_transforms(&model, &mut store, &small, &cfg, Supervision::Given(&labels)).unwrap();

        let variance_for = |k: usize, store: &mut ParamStore| {
            let mut values = Vec::new();
            for trial in 0..100 {
                let mut c = cfg.clone();
                c.samples = k;
                c.seed = 1000 + trial;
                let eps = draw_eps(&tp, &c);
                values.push(objective_value(&model, store, &small, &labels, &tp, Some(&eps), &c).unwrap());
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
        };
        let v1 = variance_for(1, &mut store);
        let v4 = variance_for(4, &mut store);
        let v16 = variance_for(16, &mut store);
        assert!(v1 > v4 && v4 > v16, "variances not monotone: {v1} {v4} {v16}");
    }
}
