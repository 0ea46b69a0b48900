//! Training: speaker/environment-independent baseline, or adaptive training
//! where SD/ED transforms are jointly optimized with the canonical
//! parameters and every utterance selects its own (speaker, env) pair.

use rand::seq::SliceRandom;

use super::dataset::AdaptationDataset;
use super::transforms::TransformParams;
use super::{PipelineError, Result};
use crate::adapt::{CacheProvenance, TransformCache};
use crate::autodiff::{Adam, AdamConfig, Graph, GraphMode, ParamStore};
use crate::features::{spec_augment_mask, MaskSpec};
use crate::model::{attention_ce_sum, Conformer};
use crate::rng::{indexed_stream, split_seed};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lambda: f64,
    pub seed: u64,
    /// Masking applied to training inputs; `None` disables.
    pub augment: Option<MaskSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            adam: AdamConfig { lr: 3e-3, ..Default::default() },
            lambda: 0.2,
            seed: 0,
            augment: Some(MaskSpec { time_masks: 1, time_width: 4, freq_masks: 1, freq_width: 3 }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Token-normalized multitask loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Unnormalized per-utterance loss node `(1-lambda)*att_sum + lambda*ctc`;
/// batch objectives divide by the summed token count.
pub(crate) fn utterance_loss_sum(
    model: &Conformer,
    g: &mut Graph,
    store: &ParamStore,
    enc: crate::autodiff::NodeId,
    reference: &crate::model::TokenSequence,
    lambda: f64,
) -> Result<(crate::autodiff::NodeId, usize)> {
    let vocab = &model.cfg.vocab;
    let sos = vocab.sos_eos();
    let mut input = Vec::with_capacity(reference.len() + 1);
    input.push(sos);
    input.extend_from_slice(reference.ids());
    let mut targets = reference.ids().to_vec();
    targets.push(sos);
    let logits = model.decoder_logits(g, store, enc, &input)?;
    let (att_sum, n) = attention_ce_sum(g, logits, &targets, vocab.size(), model.cfg.label_smoothing)?;
    let ctc_logp = model.ctc_log_probs(g, store, enc)?;
    let ctc = crate::model::ctc_loss_node(g, ctc_logp, reference, vocab.blank())?;
    let att_term = g.scale(att_sum, 1.0 - lambda)?;
    let ctc_term = g.scale(ctc, lambda)?;
    Ok((g.add(att_term, ctc_term)?, n))
}

/// Train the canonical parameters, optionally jointly with a transform set
/// (adaptive training). Every utterance needs a transcript and, when
/// `transforms` is given, (speaker, env) ids known to the set.
pub fn train_model(
    model: &Conformer,
    store: &mut ParamStore,
    dataset: &AdaptationDataset,
    transforms: Option<&TransformParams>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let utterances = dataset.utterances();
    if utterances.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    if let Some(tp) = transforms {
        for u in &utterances {
            if tp.mode.speaker_kind().is_some() && !tp.speakers.contains(&u.speaker_id) {
                return Err(PipelineError::UnknownOwner { utt: u.utterance_id.clone(), what: "speaker", id: u.speaker_id.clone() });
            }
            if tp.mode.env_kind().is_some() && !tp.envs.contains(&u.env_id) {
                return Err(PipelineError::UnknownOwner { utt: u.utterance_id.clone(), what: "env", id: u.env_id.clone() });
            }
        }
    }
    let references: Vec<crate::model::TokenSequence> = utterances
        .iter()
        .map(|u| {
            let text = u.transcript.as_ref().ok_or_else(|| PipelineError::MissingTranscript(u.utterance_id.clone()))?;
            Ok(model.cfg.vocab.encode(text)?)
        })
        .collect::<Result<_>>()?;

    let mut opt = Adam::new(cfg.adam.clone());
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = indexed_stream(cfg.seed, "train/shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_tokens = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            store.zero_grads();
            let mut batch_tokens = 0usize;
            for &ui in batch {
                let u = utterances[ui];
                let dropout_seed = split_seed(cfg.seed, &format!("train/dropout/e{epoch}/{}", u.utterance_id));
                let mut g = Graph::new(GraphMode::Train { dropout_seed });
                let frames = match &cfg.augment {
                    Some(mask) => spec_augment_mask(&u.frames, mask, split_seed(cfg.seed, &format!("train/mask/e{epoch}/{}", u.utterance_id)))?,
                    None => u.frames.clone(),
                };
                let mut h = model.subsample(&mut g, store, &frames)?;
                if let Some(tp) = transforms {
                    h = tp.apply(&mut g, store, h, &u.speaker_id, &u.env_id, None)?;
                }
                let enc = model.encoder_stack(&mut g, store, h)?;
                let (loss, n) = utterance_loss_sum(model, &mut g, store, enc, &references[ui], cfg.lambda)?;
                epoch_loss_sum += g.scalar_value(loss);
                batch_tokens += n;
                let grads = g.backward(loss)?;
                store.accumulate_grads(&grads, 1.0)?;
            }
            epoch_tokens += batch_tokens;
            let scale = 1.0 / batch_tokens.max(1) as f64;
            for p in store.iter_mut() {
                for v in p.grad.data_mut() {
                    *v *= scale;
                }
            }
            opt.step(store);
        }
        epoch_losses.push(epoch_loss_sum / epoch_tokens.max(1) as f64);
    }
    let final_loss = *epoch_losses.last().unwrap_or(&f64::NAN);
    Ok(TrainOutcome { epoch_losses, final_loss })
}

/// Adaptive training: register one deterministic SD transform per training
/// speaker and one ED transform per training environment (per the mode) and
/// co-train them with the canonical parameters.
pub fn adaptive_train(
    model: &Conformer,
    store: &mut ParamStore,
    dataset: &AdaptationDataset,
    mode: crate::adapt::AdaptationMode,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, TransformCache, TransformParams)> {
    let tp = TransformParams::for_dataset(mode, false, model.cfg.model_dim, dataset.speakers(), dataset.envs())?;
    tp.register(store)?;
    let outcome = train_model(model, store, dataset, Some(&tp), cfg)?;
    let mut cache = TransformCache::new(
        model.cfg.model_dim,
        mode.speaker_kind().or(mode.joint_kind()),
        mode.env_kind(),
        false,
        CacheProvenance { corpus: "adaptive-train".to_string(), epochs: cfg.epochs, objective: outcome.final_loss },
    );
    for t in tp.extract(store)? {
        cache.insert(t);
    }
    Ok((outcome, cache, tp))
}

/// Deterministic evaluation loss (no dropout, no masking) of a dataset under
/// optional transforms; token-normalized.
pub fn eval_loss(
    model: &Conformer,
    store: &ParamStore,
    dataset: &AdaptationDataset,
    transforms: Option<&TransformParams>,
    lambda: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for u in dataset.utterances() {
        let text = u.transcript.as_ref().ok_or_else(|| PipelineError::MissingTranscript(u.utterance_id.clone()))?;
        let reference = model.cfg.vocab.encode(text)?;
        let mut g = Graph::new(GraphMode::Eval);
        let mut h = model.subsample(&mut g, store, &u.frames)?;
        if let Some(tp) = transforms {
            h = tp.apply(&mut g, store, h, &u.speaker_id, &u.env_id, None)?;
        }
        let enc = model.encoder_stack(&mut g, store, h)?;
        let (loss, n) = utterance_loss_sum(model, &mut g, store, enc, &reference, lambda)?;
        total += g.scalar_value(loss);
        tokens += n;
    }
    Ok(total / tokens.max(1) as f64)
}

pub(crate) use utterance_loss_sum as loss_sum_node;
