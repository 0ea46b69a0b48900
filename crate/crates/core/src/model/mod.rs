//! Toy-scale Conformer encoder-decoder with convolution subsampling, hybrid
//! CTC+attention training loss and joint-score decoding.

mod config;
mod ctc;
mod decode;
mod loss;
mod net;
mod vocab;

pub use config::ModelConfig;
pub use ctc::{ctc_loss_node, ctc_loss_value, ctc_min_frames};
pub use decode::{decode_utterance, DecodeParams, EncodedUtterance, Hypothesis};
pub use loss::{attention_ce_sum, multitask_loss, utterance_loss_node, UtteranceLoss, SMOOTHING_LOG_FLOOR};
pub use net::{Conformer, TransformHook};
pub use vocab::{TokenSequence, Vocab};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("input has {got} frames; subsampling needs at least {min}")]
    InputTooShort { got: usize, min: usize },
    #[error("ctc: label of length {label} (min {min} frames) cannot align to {frames} frames")]
    CtcInfeasible { label: usize, min: usize, frames: usize },
    #[error("token id {0} outside vocabulary")]
    TokenOutsideVocab(u32),
    #[error("character {0:?} outside vocabulary")]
    CharOutsideVocab(char),
    #[error("reference may not contain blank/sos/eos (id {0})")]
    ReservedToken(u32),
    #[error("empty reference")]
    EmptyReference,
    #[error("lambda {0} out of [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("beam size must be at least 1")]
    BadBeam,
    #[error(transparent)]
    Ad(#[from] crate::autodiff::AdError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
