//! End-to-end direction-of-effect study on the synthetic corpus.
//!
//! One run trains a speaker/environment-independent baseline, then compares
//! test-time adaptation modes and the rapid cached-transform pairings on an
//! unseen speaker-by-environment grid, reporting token error rates.

use std::collections::HashMap;

use super::dataset::AdaptationDataset;
use super::estimate::{estimate_transforms, first_pass_decode, EstimationConfig, Supervision};
use super::rapid::{build_conditional_cache, rapid_adapt_from_cache, Pairing};
use super::synth::{generate_synthetic_corpus, SyntheticTaskSpec};
use super::testtime::{decode_dataset_with, values_from_params};
use super::train::{train_model, TrainConfig};
use super::transforms::TransformParams;
use super::{Hypothesis, Result};
use crate::adapt::{AdaptationMode, FactorTransform, TransformKind};
use crate::autodiff::{AdamConfig, ParamStore};
use crate::model::{Conformer, DecodeParams, ModelConfig, TokenSequence, Vocab};
use crate::rng::split_seed;
use crate::score::{edit_align, wer_percent, ErrorCounts};

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub train_speakers: usize,
    pub train_envs: usize,
    pub train_utts_per_cell: usize,
    pub test_speakers: usize,
    pub test_envs: usize,
    pub test_utts_per_cell: usize,
    pub train_epochs: usize,
    pub estimation_epochs: usize,
    pub estimation_initial_lr: f64,
    pub beam: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub subsample_channels: usize,
    pub synth: SyntheticTaskSpec,
    pub hub_prior_dev: f64,
    pub lambda_train: f64,
    pub lambda_decode: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            train_speakers: 10,
            train_envs: 4,
            train_utts_per_cell: 6,
            test_speakers: 6,
            test_envs: 3,
            test_utts_per_cell: 6,
            train_epochs: 18,
            estimation_epochs: 3,
            estimation_initial_lr: 1.0,
            beam: 1,
            model_dim: 48,
            heads: 4,
            ff_dim: 192,
            subsample_channels: 24,
            synth: SyntheticTaskSpec::default_with(0, 0, 0, 0, ""),
            hub_prior_dev: 0.0316227766016838,
            lambda_train: 0.2,
            lambda_decode: 0.3,
        }
    }
}

/// Token error rates of one study run.
#[derive(Debug, Clone, Default)]
pub struct StudyOutcome {
    pub baseline: f64,
    pub speaker_only: f64,
    pub speaker_only_bayes: f64,
    pub lfa: f64,
    pub cfa_det: f64,
    pub cfa_bayes: f64,
    pub rapid_matched: f64,
    pub rapid_mm_env: f64,
    pub rapid_mm_spk: f64,
    pub rapid_mm_both: f64,
}

impl StudyOutcome {
    pub fn best_factorised(&self) -> f64 {
        self.lfa.min(self.cfa_det)
    }

    pub fn summary(&self) -> String {
        format!(
            "baseline {:.2} | spk-only {:.2} (bayes {:.2}) | lfa(0.7) {:.2} | cfa-hh {:.2} (bayes {:.2}) | rapid m {:.2} / mm-env {:.2} / mm-spk {:.2} / mm-both {:.2}",
            self.baseline,
            self.speaker_only,
            self.speaker_only_bayes,
            self.lfa,
            self.cfa_det,
            self.cfa_bayes,
            self.rapid_matched,
            self.rapid_mm_env,
            self.rapid_mm_spk,
            self.rapid_mm_both
        )
    }
}

/// Token error rate of hypotheses against reference transcripts, from
/// summed counts.
pub fn token_error_rate(model: &Conformer, dataset: &AdaptationDataset, hyps: &[(String, Hypothesis)]) -> Result<f64> {
    let refs: HashMap<String, TokenSequence> = dataset
        .utterances()
        .into_iter()
        .map(|u| Ok((u.utterance_id.clone(), model.cfg.vocab.encode(u.transcript.as_ref().expect("scored utterance has transcript"))?)))
        .collect::<Result<_>>()?;
    let mut total = ErrorCounts::default();
    for (id, hyp) in hyps {
        let reference = &refs[id];
        let alignment = edit_align(reference.ids(), hyp.tokens.ids());
        total.add(&ErrorCounts::from_alignment(&alignment, reference.len()));
    }
    Ok(wer_percent(&total).expect("non-empty reference set"))
}

pub fn model_for(cfg: &StudyConfig) -> Result<Conformer> {
    let vocab = Vocab::new(&cfg.synth.alphabet)?;
    let model_cfg = ModelConfig {
        feature_dim: cfg.synth.feature_dim,
        encoder_blocks: 2,
        decoder_blocks: 1,
        model_dim: cfg.model_dim,
        heads: cfg.heads,
        ff_dim: cfg.ff_dim,
        conv_kernel: 7,
        subsample_channels: cfg.subsample_channels,
        vocab,
        lambda_train: cfg.lambda_train,
        lambda_decode: cfg.lambda_decode,
        dropout: 0.1,
        label_smoothing: 0.1,
    };
    Ok(Conformer::new(model_cfg)?)
}

fn estimation_config(cfg: &StudyConfig, mode: AdaptationMode, variational: bool, seed: u64) -> EstimationConfig {
    let mut est = EstimationConfig::new(mode, variational, seed);
    est.epochs = cfg.estimation_epochs;
    est.initial_lr = cfg.estimation_initial_lr;
    est.lambda = cfg.lambda_train;
    est.hub_prior_dev = cfg.hub_prior_dev;
    est
}

/// Estimate on pseudo labels and decode the test set with the posterior
/// means; shares the first-pass labels across modes.
fn adapted_ter(
    model: &Conformer,
    canonical: &ParamStore,
    test: &AdaptationDataset,
    labels: &HashMap<String, TokenSequence>,
    est: &EstimationConfig,
    decode: &DecodeParams,
) -> Result<f64> {
    let mut store = canonical.clone();
    let (tp, _) = estimate_transforms(model, &mut store, test, est, Supervision::Given(labels))?;
    let transforms: Vec<FactorTransform> = tp.extract(&store)?.into_iter().map(|t| t.posterior_mean_inference()).collect();
    let hyps = {
        let values_for = values_from_params(&tp, &transforms);
        decode_dataset_with(model, &store, test, &values_for, decode)?
    };
    token_error_rate(model, test, &hyps)
}

/// Train a baseline on the training grid and evaluate every adaptation mode
/// on the unseen test grid.
pub fn run_study(cfg: &StudyConfig, seed: u64) -> Result<(StudyOutcome, TrainDiagnostics)> {
    let mut train_spec = cfg.synth.clone();
    train_spec.speakers = cfg.train_speakers;
    train_spec.envs = cfg.train_envs;
    train_spec.utterances_per_cell = cfg.train_utts_per_cell;
    train_spec.seed = seed;
    train_spec.id_prefix = "trn".to_string();
    let train_corpus = generate_synthetic_corpus(&train_spec)?;

    let mut test_spec = train_spec.clone();
    test_spec.speakers = cfg.test_speakers;
    test_spec.envs = cfg.test_envs;
    test_spec.utterances_per_cell = cfg.test_utts_per_cell;
    test_spec.id_prefix = "tst".to_string();
    let test_corpus = generate_synthetic_corpus(&test_spec)?;

    let model = model_for(cfg)?;
    let mut store = ParamStore::new();
    model.init_params(&mut store, split_seed(seed, "study/model-init"))?;

    let train_cfg = TrainConfig {
        epochs: cfg.train_epochs,
        batch_size: 8,
        adam: AdamConfig { lr: 3e-3, ..Default::default() },
        lambda: cfg.lambda_train,
        seed: split_seed(seed, "study/train"),
        augment: Some(crate::features::MaskSpec { time_masks: 1, time_width: 4, freq_masks: 1, freq_width: 3 }),
    };
    let outcome = train_model(&model, &mut store, &train_corpus.dataset, None, &train_cfg)?;

    let decode = DecodeParams { beam: cfg.beam, lambda: cfg.lambda_decode, max_len: None };
    let test = &test_corpus.dataset;

    let first_pass = first_pass_decode(&model, &store, test, &decode)?;
    let labels: HashMap<String, TokenSequence> = first_pass.iter().map(|(id, h)| (id.clone(), h.tokens.clone())).collect();
    let baseline = token_error_rate(&model, test, &first_pass)?;

    let hub = TransformKind::Hub;
    let cfa = AdaptationMode::Cfa { spk: hub, env: hub };
    let est_seed = split_seed(seed, "study/estimate");

    let speaker_only = adapted_ter(&model, &store, test, &labels, &estimation_config(cfg, AdaptationMode::SpeakerOnly { kind: hub }, false, est_seed), &decode)?;
    let speaker_only_bayes = adapted_ter(&model, &store, test, &labels, &estimation_config(cfg, AdaptationMode::SpeakerOnly { kind: hub }, true, est_seed), &decode)?;
    let lfa = adapted_ter(&model, &store, test, &labels, &estimation_config(cfg, AdaptationMode::Lfa { beta: 0.7 }, false, est_seed), &decode)?;
    let cfa_det = adapted_ter(&model, &store, test, &labels, &estimation_config(cfg, cfa, false, est_seed), &decode)?;
    let cfa_bayes = adapted_ter(&model, &store, test, &labels, &estimation_config(cfg, cfa, true, est_seed), &decode)?;

    // rapid adaptation: per-cell conditional cache, then the four pairings
    let rapid_est = estimation_config(cfg, cfa, true, split_seed(seed, "study/rapid-est"));
    let (cache, _) = build_conditional_cache(&model, &store, test, &rapid_est, &decode)?;
    let pairing_seed = split_seed(seed, "study/rapid-pairing");
    let mut rapid = [0.0; 4];
    for (i, pairing) in [Pairing::Matched, Pairing::MismatchedEnv, Pairing::MismatchedSpeaker, Pairing::BothMismatched].iter().enumerate() {
        let hyps = rapid_adapt_from_cache(&model, &store, &cache, test, cfa, *pairing, pairing_seed, &decode)?;
        rapid[i] = token_error_rate(&model, test, &hyps)?;
    }

    Ok((
        StudyOutcome {
            baseline,
            speaker_only,
            speaker_only_bayes,
            lfa,
            cfa_det,
            cfa_bayes,
            rapid_matched: rapid[0],
            rapid_mm_env: rapid[1],
            rapid_mm_spk: rapid[2],
            rapid_mm_both: rapid[3],
        },
        TrainDiagnostics { epoch_losses: outcome.epoch_losses },
    ))
}

#[derive(Debug, Clone, Default)]
pub struct TrainDiagnostics {
    pub epoch_losses: Vec<f64>,
}

/// Mean outcome over seeds.
pub fn mean_outcomes(outcomes: &[StudyOutcome]) -> StudyOutcome {
    let n = outcomes.len().max(1) as f64;
    let mut mean = StudyOutcome::default();
    for o in outcomes {
        mean.baseline += o.baseline / n;
        mean.speaker_only += o.speaker_only / n;
        mean.speaker_only_bayes += o.speaker_only_bayes / n;
        mean.lfa += o.lfa / n;
        mean.cfa_det += o.cfa_det / n;
        mean.cfa_bayes += o.cfa_bayes / n;
        mean.rapid_matched += o.rapid_matched / n;
        mean.rapid_mm_env += o.rapid_mm_env / n;
        mean.rapid_mm_spk += o.rapid_mm_spk / n;
        mean.rapid_mm_both += o.rapid_mm_both / n;
    }
    mean
}
