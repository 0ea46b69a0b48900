//! Attention-branch cross-entropy and the multi-task combination.

use super::config::ModelConfig;
use super::vocab::TokenSequence;
use super::{ModelError, Result};
use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::model::net::Conformer;

/// Log-probabilities are floored here inside the attention cross-entropy, so
/// the smoothed loss of a hard one-hot decoder stays finite.
pub const SMOOTHING_LOG_FLOOR: f64 = -23.025850929940457; // ln(1e-10)

/// Sum over decode steps of the label-smoothed cross-entropy of `logits`
/// (rows = steps) against `targets`. Returns the sum node and the token
/// count; divide by the count for the per-token loss.
pub fn attention_ce_sum(g: &mut Graph, logits: NodeId, targets: &[u32], vocab_size: usize, smoothing: f64) -> Result<(NodeId, usize)> {
    if targets.is_empty() {
        return Err(ModelError::EmptyReference);
    }
    let rows = g.value(logits).shape()[0];
    if rows != targets.len() {
        return Err(ModelError::BadConfig(format!("{} logit rows for {} targets", rows, targets.len())));
    }
    for &y in targets {
        if y as usize >= vocab_size {
            return Err(ModelError::TokenOutsideVocab(y));
        }
    }
    let n = targets.len();
    let mut q = vec![smoothing / vocab_size as f64; n * vocab_size];
    for (i, &y) in targets.iter().enumerate() {
        q[i * vocab_size + y as usize] += 1.0 - smoothing;
    }
    let q = g.constant(Tensor::matrix(n, vocab_size, q)?);
    let logp = g.log_softmax(logits)?;
    let logp = g.clamp_min(logp, SMOOTHING_LOG_FLOOR)?;
    let weighted = g.mul(q, logp)?;
    let total = g.sum(weighted)?;
    Ok((g.scale(total, -1.0)?, n))
}

/// `(1 - lambda) * att + lambda * ctc`.
pub fn multitask_loss(att: f64, ctc: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ModelError::LambdaOutOfRange(lambda));
    }
    Ok((1.0 - lambda) * att + lambda * ctc)
}

/// Scalar pieces of one utterance's loss, for logging.
#[derive(Debug, Clone, Copy)]
pub struct UtteranceLoss {
    /// Attention cross-entropy per token.
    pub attention: f64,
    /// Unnormalized CTC negative log-likelihood.
    pub ctc: f64,
    /// (1-lambda) * attention + lambda * ctc.
    pub multitask: f64,
    pub tokens: usize,
}

/// Build one utterance's multitask loss node:
/// `(1-lambda) * att_sum/N + lambda * ctc`. The decoder is teacher-forced on
/// `[sos] + reference`, targets are `reference + [eos]`.
pub fn utterance_loss_node(
    model: &Conformer,
    g: &mut Graph,
    store: &ParamStore,
    enc: NodeId,
    reference: &TokenSequence,
    lambda: f64,
) -> Result<(NodeId, UtteranceLoss)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ModelError::LambdaOutOfRange(lambda));
    }
    if reference.is_empty() {
        return Err(ModelError::EmptyReference);
    }
    let cfg: &ModelConfig = &model.cfg;
    let sos = cfg.vocab.sos_eos();
    let mut input = Vec::with_capacity(reference.len() + 1);
    input.push(sos);
    input.extend_from_slice(reference.ids());
    let mut targets = reference.ids().to_vec();
    targets.push(sos);

    let logits = model.decoder_logits(g, store, enc, &input)?;
    let (att_sum, n) = attention_ce_sum(g, logits, &targets, cfg.vocab.size(), cfg.label_smoothing)?;

    let ctc_logp = model.ctc_log_probs(g, store, enc)?;
    let ctc = super::ctc::ctc_loss_node(g, ctc_logp, reference, cfg.vocab.blank())?;

    let att_term = g.scale(att_sum, (1.0 - lambda) / n as f64)?;
    let ctc_term = g.scale(ctc, lambda)?;
    let loss = g.add(att_term, ctc_term)?;

    let att_value = g.scalar_value(att_sum) / n as f64;
    let ctc_value = g.scalar_value(ctc);
    let pieces = UtteranceLoss {
        attention: att_value,
        ctc: ctc_value,
        multitask: multitask_loss(att_value, ctc_value, lambda)?,
        tokens: n,
    };
    Ok((loss, pieces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphMode;

    #[test]
    fn one_hot_correct_decoder_no_smoothing_is_zero() {
        let mut g = Graph::new(GraphMode::Eval);
        // logits so extreme the softmax is exactly one-hot in f64
        let logits = g.constant(Tensor::matrix(2, 3, vec![1000.0, -1000.0, -1000.0, -1000.0, 1000.0, -1000.0]).unwrap());
        let (sum, n) = attention_ce_sum(&mut g, logits, &[0, 1], 3, 0.0).unwrap();
        assert_eq!(g.scalar_value(sum), 0.0);
        assert_eq!(n, 2);
    }

    #[test]
    fn uniform_decoder_costs_ln_v() {
        let mut g = Graph::new(GraphMode::Eval);
        let logits = g.constant(Tensor::matrix(1, 5, vec![0.7; 5]).unwrap());
        let (sum, _) = attention_ce_sum(&mut g, logits, &[3], 5, 0.0).unwrap();
        assert!((g.scalar_value(sum) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smoothed_one_hot_decoder_hits_the_analytic_floor() {
        // Oracle: -sum_v q[v] * max(log p[v], floor) evaluated numerically
        // for a one-hot p.
        let (vcount, eps) = (4usize, 0.1f64);
        let q_target = 1.0 - eps + eps / vcount as f64;
        let q_other = eps / vcount as f64;
        let oracle = -(q_target * 0.0 + (vcount - 1) as f64 * q_other * SMOOTHING_LOG_FLOOR);

        let mut g = Graph::new(GraphMode::Eval);
        let logits = g.constant(Tensor::matrix(1, 4, vec![1000.0, -1000.0, -1000.0, -1000.0]).unwrap());
        let (sum, _) = attention_ce_sum(&mut g, logits, &[0], 4, eps).unwrap();
        assert!((g.scalar_value(sum) - oracle).abs() < 1e-12, "{} vs {oracle}", g.scalar_value(sum));
    }

    #[test]
    fn multitask_boundaries_and_interpolation() {
        assert_eq!(multitask_loss(2.0, 5.0, 0.0).unwrap(), 2.0);
        assert_eq!(multitask_loss(2.0, 5.0, 1.0).unwrap(), 5.0);
        assert!((multitask_loss(2.0, 5.0, 0.2).unwrap() - 2.6).abs() < 1e-15);
        assert!(matches!(multitask_loss(1.0, 1.0, 1.5), Err(ModelError::LambdaOutOfRange(_))));
        assert!(matches!(multitask_loss(1.0, 1.0, -0.1), Err(ModelError::LambdaOutOfRange(_))));
    }

    #[test]
    fn token_outside_vocab_is_an_error() {
        let mut g = Graph::new(GraphMode::Eval);
        let logits = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        assert!(matches!(attention_ce_sum(&mut g, logits, &[7], 3, 0.0), Err(ModelError::TokenOutsideVocab(7))));
    }
}
