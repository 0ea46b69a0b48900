//! Factorised speaker-environment adaptation for a miniature hybrid
//! CTC/attention ASR model.
//!
//! The crate is organised around a small reverse-mode autodiff engine
//! ([`autodiff`]), a toy Conformer-style encoder-decoder ([`model`]), the
//! speaker/environment transform algebra with deterministic and variational
//! parameterisations ([`adapt`]), and the training / test-time adaptation
//! pipelines that tie them together ([`pipeline`]). Supporting modules cover
//! log-mel feature extraction ([`features`]), SNR-controlled noise corpus
//! simulation ([`noise`]), edit-distance scoring ([`score`]) and the
//! plain-text experiment configuration format ([`expconfig`]).

pub mod adapt;
pub mod autodiff;
pub mod expconfig;
pub mod features;
pub mod model;
pub mod noise;
pub mod pipeline;
pub mod rng;
pub mod score;
