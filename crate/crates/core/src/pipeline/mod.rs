//! Orchestration: adaptive training, test-time transform estimation over
//! data unions, pseudo-label generation, the transform cache and the
//! rapid-adaptation reuse scenario, plus the synthetic speaker-environment
//! corpus generator used for desk-scale experiments.

mod dataset;
mod estimate;
mod rapid;
mod study;
mod synth;
mod testtime;
mod train;
mod transforms;

pub use dataset::AdaptationDataset;
pub use estimate::{estimate_transforms, first_pass_decode, objective_value, EpsDraws, EstimationConfig, EstimationOutcome, Supervision};
pub use rapid::{build_conditional_cache, conditional_owner_id, decode_via_cache_matched, rapid_adapt_from_cache, Pairing};
pub use study::{mean_outcomes, model_for, run_study, token_error_rate, StudyConfig, StudyOutcome, TrainDiagnostics};
pub use synth::{generate_synthetic_corpus, SyntheticCorpus, SyntheticGroundTruth, SyntheticTaskSpec};
pub use testtime::{decode_dataset_with, decode_with_values, test_time_adapt, values_from_params, TestTimeOutcome};
pub use train::{adaptive_train, eval_loss, train_model, TrainConfig, TrainOutcome};
pub use transforms::{EpsMap, TransformParams};

use thiserror::Error;

pub use crate::model::Hypothesis;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("synthetic task spec invalid: {0}")]
    BadSpec(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("empty adaptation cell for requested transform owner {0:?}")]
    EmptyCell(String),
    #[error("utterance {0:?} has no transcript but training requires one")]
    MissingTranscript(String),
    #[error("utterance {utt:?} labeled with unknown {what} {id:?}; ids are fixed at start")]
    UnknownOwner { utt: String, what: &'static str, id: String },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Adapt(#[from] crate::adapt::AdaptError),
    #[error(transparent)]
    Ad(#[from] crate::autodiff::AdError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
