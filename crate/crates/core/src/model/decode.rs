//! Joint CTC/attention decoding.
//!
//! Beam search over decoder prefixes scored by
//! `(1-lambda) * att_logprob + lambda * ctc_prefix_logprob`, greedy decoding
//! being beam size 1. The CTC prefix score is the probability that the CTC
//! output *begins with* the prefix, computed incrementally per candidate.

use super::net::{Conformer, TransformHook};
use super::vocab::TokenSequence;
use super::{ModelError, Result};
use crate::autodiff::{Graph, GraphMode, ParamStore, Tensor};

const NEG_INF: f64 = f64::NEG_INFINITY;

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// A decoded utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeParams {
    pub beam: usize,
    pub lambda: f64,
    /// Cap on emitted tokens; defaults to the encoder frame count.
    pub max_len: Option<usize>,
}

/// Encoder outputs needed for decoding, computed once per utterance.
pub struct EncodedUtterance {
    pub enc: Tensor,
    pub ctc_logp: Tensor,
}

impl EncodedUtterance {
    pub fn compute(model: &Conformer, store: &ParamStore, feats: &Tensor, transform: Option<TransformHook>) -> Result<Self> {
        let mut g = Graph::new(GraphMode::Eval);
        let enc = model.encode(&mut g, store, feats, transform)?;
        let ctc = model.ctc_log_probs(&mut g, store, enc)?;
        Ok(EncodedUtterance { enc: g.value(enc).clone(), ctc_logp: g.value(ctc).clone() })
    }
}

// ── CTC prefix scoring ──────────────────────────────────────────────

/// Per-prefix CTC state: for each frame t, the log-probability that the
/// prefix has been fully emitted by t with the path ending in its last
/// symbol (`r_nb`) or in blank (`r_b`).
#[derive(Debug, Clone)]
struct CtcPrefixState {
    r_nb: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<u32>,
    empty: bool,
}

struct CtcPrefixScorer<'a> {
    logp: &'a [f64],
    t_len: usize,
    v: usize,
    blank: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    fn new(ctc_logp: &'a Tensor, blank: u32) -> Self {
        let shape = ctc_logp.shape();
        CtcPrefixScorer { logp: ctc_logp.data(), t_len: shape[0], v: shape[1], blank: blank as usize }
    }

    fn p(&self, t: usize, k: usize) -> f64 {
        self.logp[t * self.v + k]
    }

    fn empty_state(&self) -> CtcPrefixState {
        let mut r_b = Vec::with_capacity(self.t_len);
        let mut acc = 0.0;
        for t in 0..self.t_len {
            acc += self.p(t, self.blank);
            r_b.push(acc);
        }
        CtcPrefixState { r_nb: vec![NEG_INF; self.t_len], r_b, last: None, empty: true }
    }

    /// Extend a prefix with token `c`, returning the new state and the
    /// prefix log-probability of the extended prefix.
    fn extend(&self, state: &CtcPrefixState, c: u32) -> (CtcPrefixState, f64) {
        let mut r_nb = vec![NEG_INF; self.t_len];
        let mut r_b = vec![NEG_INF; self.t_len];
        let mut psi = NEG_INF;
        for t in 0..self.t_len {
            // phi at t-1: paths that emitted the parent prefix and may start c now
            let phi_prev = if t == 0 {
                if state.empty {
                    0.0
                } else {
                    NEG_INF
                }
            } else {
                let keep_nb = if state.last == Some(c) { NEG_INF } else { state.r_nb[t - 1] };
                logaddexp(state.r_b[t - 1], keep_nb)
            };
            let pc = self.p(t, c as usize);
            let prev_nb = if t == 0 { NEG_INF } else { r_nb[t - 1] };
            r_nb[t] = pc + logaddexp(phi_prev, prev_nb);
            let prev_b = if t == 0 { NEG_INF } else { logaddexp(r_b[t - 1], r_nb[t - 1]) };
            r_b[t] = self.p(t, self.blank) + prev_b;
            psi = logaddexp(psi, phi_prev + pc);
        }
        (CtcPrefixState { r_nb, r_b, last: Some(c), empty: false }, psi)
    }

    /// Log-probability that the output equals the prefix exactly.
    fn complete(&self, state: &CtcPrefixState) -> f64 {
        logaddexp(state.r_b[self.t_len - 1], state.r_nb[self.t_len - 1])
    }
}

// ── beam search ─────────────────────────────────────────────────────

struct Beam {
    tokens: Vec<u32>,
    att_cum: f64,
    ctc: CtcPrefixState,
}

/// Attention log-probabilities over the next token given a prefix.
fn next_token_logprobs(model: &Conformer, store: &ParamStore, enc: &Tensor, prefix: &[u32]) -> Result<Vec<f64>> {
    let sos = model.cfg.vocab.sos_eos();
    let mut input = Vec::with_capacity(prefix.len() + 1);
    input.push(sos);
    input.extend_from_slice(prefix);
    let mut g = Graph::new(GraphMode::Eval);
    let enc_node = g.constant(enc.clone());
    let logits = model.decoder_logits(&mut g, store, enc_node, &input)?;
    let logp = g.log_softmax(logits)?;
    let t = g.value(logp);
    let v = t.shape()[1];
    let last = t.data()[(input.len() - 1) * v..].to_vec();
    Ok(last)
}

/// Decode one utterance with joint scoring. Deterministic; score ties break
/// toward the lexicographically smaller token sequence.
pub fn decode_utterance(model: &Conformer, store: &ParamStore, encoded: &EncodedUtterance, params: &DecodeParams) -> Result<Hypothesis> {
    if params.beam < 1 {
        return Err(ModelError::BadBeam);
    }
    if !(0.0..=1.0).contains(&params.lambda) {
        return Err(ModelError::LambdaOutOfRange(params.lambda));
    }
    let vocab = &model.cfg.vocab;
    let eos = vocab.sos_eos();
    let lambda = params.lambda;
    let t_len = encoded.ctc_logp.shape()[0];
    let max_len = params.max_len.unwrap_or(t_len).max(1);

    let scorer = CtcPrefixScorer::new(&encoded.ctc_logp, vocab.blank());
    let mut live = vec![Beam { tokens: Vec::new(), att_cum: 0.0, ctc: scorer.empty_state() }];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();

    for _step in 0..max_len {
        if live.is_empty() {
            break;
        }
        // (joint score, candidate tokens, source beam, token, att_cum after)
        let mut candidates: Vec<(f64, Vec<u32>, usize, u32, f64)> = Vec::new();
        for (bi, beam) in live.iter().enumerate() {
            let att = next_token_logprobs(model, store, &encoded.enc, &beam.tokens)?;
            for c in vocab.char_ids() {
                let att_cum = beam.att_cum + att[c as usize];
                let (_, psi) = scorer.extend(&beam.ctc, c);
                let joint = (1.0 - lambda) * att_cum + lambda * psi;
                let mut tokens = beam.tokens.clone();
                tokens.push(c);
                candidates.push((joint, tokens, bi, c, att_cum));
            }
            let att_cum = beam.att_cum + att[eos as usize];
            let joint = (1.0 - lambda) * att_cum + lambda * scorer.complete(&beam.ctc);
            candidates.push((joint, beam.tokens.clone(), bi, eos, att_cum));
        }
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.1.cmp(&b.1)));

        // Top-`beam` candidates survive; an eos pick ends its hypothesis.
        // Wider beams also pool every beam's eos option: scores are monotone
        // non-increasing along extensions, so pooling never hurts.
        let mut next = Vec::with_capacity(params.beam);
        for (joint, tokens, bi, c, att_cum) in candidates.iter().take(params.beam) {
            if *c == eos {
                finished.push((tokens.clone(), *joint));
            } else {
                let (state, _) = scorer.extend(&live[*bi].ctc, *c);
                next.push(Beam { tokens: tokens.clone(), att_cum: *att_cum, ctc: state });
            }
        }
        if params.beam > 1 {
            for (joint, tokens, _, c, _) in &candidates {
                if *c == eos {
                    finished.push((tokens.clone(), *joint));
                }
            }
        }
        live = next;

        // Monotonicity stopper: no live prefix can beat the best ended one.
        let best_live = live.iter().map(|b| (1.0 - lambda) * b.att_cum + lambda * scorer.complete(&b.ctc)).fold(NEG_INF, f64::max);
        let best_live_prefix = candidates.iter().filter(|(_, _, _, c, _)| *c != eos).map(|(j, ..)| *j).fold(best_live, f64::max);
        if let Some(best_done) = finished.iter().map(|(_, s)| *s).max_by(|a, b| a.partial_cmp(b).unwrap()) {
            if best_done >= best_live_prefix {
                break;
            }
        }
    }

    // force-finish anything still alive at the length cap
    for beam in live {
        let att = next_token_logprobs(model, store, &encoded.enc, &beam.tokens)?;
        let att_cum = beam.att_cum + att[eos as usize];
        let joint = (1.0 - lambda) * att_cum + lambda * scorer.complete(&beam.ctc);
        finished.push((beam.tokens, joint));
    }

    let (tokens, score) = finished
        .into_iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then_with(|| b.0.cmp(&a.0)))
        .expect("at least one hypothesis");
    let tokens = vocab.tokens(tokens)?;
    let text = vocab.decode(&tokens);
    Ok(Hypothesis { tokens, text, score })
}
