//! CTC loss in log space.
//!
//! Forward: the usual blank-augmented lattice, alpha recursion over
//! `l' = [b, y1, b, y2, ..., b]`. Backward: beta recursion plus the state
//! posteriors, yielding the exact gradient w.r.t. the frame log-probs. The
//! op registers itself on the tape as a custom-gradient node.

use super::vocab::TokenSequence;
use super::{ModelError, Result};
use crate::autodiff::{CustomOp, Graph, NodeId, Tensor};

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

/// Minimum frame count admitting an alignment: one frame per label plus a
/// separating blank frame per adjacent repeat.
pub fn ctc_min_frames(labels: &[u32]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn extended(labels: &[u32], blank: u32) -> Vec<u32> {
    let mut l = Vec::with_capacity(2 * labels.len() + 1);
    l.push(blank);
    for &y in labels {
        l.push(y);
        l.push(blank);
    }
    l
}

fn alpha_table(logp: &[f64], t_len: usize, v: usize, ext: &[u32], blank: u32) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = logp[ext[0] as usize];
    if s_len > 1 {
        alpha[1] = logp[ext[1] as usize];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = logaddexp(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                acc = logaddexp(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            if acc != NEG_INF {
                alpha[t * s_len + s] = acc + logp[t * v + ext[s] as usize];
            }
        }
    }
    alpha
}

/// -log p(labels | frame log-probs). `logp` is (T, V) row-major and already
/// log-normalized per frame.
pub fn ctc_loss_value(logp: &[f64], t_len: usize, v: usize, labels: &[u32], blank: u32) -> Result<f64> {
    for &y in labels {
        if y as usize >= v {
            return Err(ModelError::TokenOutsideVocab(y));
        }
        if y == blank {
            return Err(ModelError::ReservedToken(y));
        }
    }
    let min = ctc_min_frames(labels);
    if t_len < min {
        return Err(ModelError::CtcInfeasible { label: labels.len(), min, frames: t_len });
    }
    let ext = extended(labels, blank);
    let s_len = ext.len();
    let alpha = alpha_table(logp, t_len, v, &ext, blank);
    let mut total = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len > 1 {
        total = logaddexp(total, alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    if total == NEG_INF {
        return Err(ModelError::CtcInfeasible { label: labels.len(), min, frames: t_len });
    }
    Ok(-total)
}

struct CtcOp {
    labels: Vec<u32>,
    blank: u32,
}

impl CustomOp for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, inputs: &[(&[usize], &[f64])], out_data: &[f64], d_out: &[f64], d_inputs: &mut [Vec<f64>]) {
        let (shape, logp) = inputs[0];
        let (t_len, v) = (shape[0], shape[1]);
        let loss = out_data[0];
        let upstream = d_out[0];
        let ext = extended(&self.labels, self.blank);
        let s_len = ext.len();

        let alpha = alpha_table(logp, t_len, v, &ext, self.blank);
        // beta[t][s]: completion probability using emissions after frame t.
        let mut beta = vec![NEG_INF; t_len * s_len];
        beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
        if s_len > 1 {
            beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
        }
        for t in (0..t_len - 1).rev() {
            for s in 0..s_len {
                let mut acc = beta[(t + 1) * s_len + s] + logp[(t + 1) * v + ext[s] as usize];
                if s + 1 < s_len {
                    acc = logaddexp(acc, beta[(t + 1) * s_len + s + 1] + logp[(t + 1) * v + ext[s + 1] as usize]);
                }
                if s + 2 < s_len && ext[s + 2] != self.blank && ext[s + 2] != ext[s] {
                    acc = logaddexp(acc, beta[(t + 1) * s_len + s + 2] + logp[(t + 1) * v + ext[s + 2] as usize]);
                }
                beta[t * s_len + s] = acc;
            }
        }

        // dL/dlogp[t][k] = -exp(logsumexp_{s: l'_s = k}(alpha + beta) - logZ),
        // logZ = -loss.
        let d = &mut d_inputs[0];
        for t in 0..t_len {
            let mut gamma = vec![NEG_INF; v];
            for s in 0..s_len {
                let a = alpha[t * s_len + s];
                let b = beta[t * s_len + s];
                if a != NEG_INF && b != NEG_INF {
                    let k = ext[s] as usize;
                    gamma[k] = logaddexp(gamma[k], a + b);
                }
            }
            for k in 0..v {
                if gamma[k] != NEG_INF {
                    d[t * v + k] = -upstream * (gamma[k] + loss).exp();
                }
            }
        }
    }
}

/// Record the CTC loss of a (T,V) log-prob node against a reference on the
/// tape.
pub fn ctc_loss_node(g: &mut Graph, logp: NodeId, reference: &TokenSequence, blank: u32) -> Result<NodeId> {
    let t = g.value(logp);
    let shape = t.shape().to_vec();
    if shape.len() != 2 {
        return Err(ModelError::BadConfig(format!("ctc expects (T,V) log-probs, got {shape:?}")));
    }
    let loss = ctc_loss_value(t.data(), shape[0], shape[1], reference.ids(), blank)?;
    let out = g.custom(&[logp], Tensor::scalar(loss), Box::new(CtcOp { labels: reference.ids().to_vec(), blank }))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, GradMap, Graph, GraphMode, ParamStore};
    use crate::model::vocab::Vocab;
    use rand::Rng;

    /// Brute-force oracle: enumerate every frame-label path, collapse it and
    /// accumulate the probabilities of paths matching the reference.
    fn brute_force(logp: &[f64], t_len: usize, v: usize, labels: &[u32], blank: u32) -> f64 {
        fn collapse(path: &[u32], blank: u32) -> Vec<u32> {
            let mut out = Vec::new();
            let mut prev = None;
            for &p in path {
                if Some(p) != prev && p != blank {
                    out.push(p);
                }
                prev = Some(p);
            }
            out
        }
        let mut total = 0.0;
        let paths = (v as u64).pow(t_len as u32);
        for code in 0..paths {
            let mut c = code;
            let mut path = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                path.push((c % v as u64) as u32);
                c /= v as u64;
            }
            if collapse(&path, blank) == labels {
                let lp: f64 = path.iter().enumerate().map(|(t, &k)| logp[t * v + k as usize]).sum();
                total += lp.exp();
            }
        }
        -total.ln()
    }

    fn uniform_logp(t: usize, v: usize) -> Vec<f64> {
        vec![(1.0 / v as f64).ln(); t * v]
    }

    #[test]
    fn certain_single_label_is_zero_loss() {
        // T=1, vocab {blank, a}, p(a) ~ 1
        let logp = vec![-745.0, 0.0];
        let loss = ctc_loss_value(&logp, 1, 2, &[1], 0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn two_frame_uniform_matches_enumeration() {
        // alignments {aa, a-, -a}: 3 * 0.25 -> -ln(0.75)
        let logp = uniform_logp(2, 2);
        let loss = ctc_loss_value(&logp, 2, 2, &[1], 0).unwrap();
        assert!((loss - (-(0.75f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separating_blank() {
        let logp = uniform_logp(2, 2);
        assert!(matches!(ctc_loss_value(&logp, 2, 2, &[1, 1], 0), Err(ModelError::CtcInfeasible { min: 3, .. })));
        assert!(ctc_loss_value(&uniform_logp(3, 2), 3, 2, &[1, 1], 0).is_ok());
    }

    #[test]
    fn matches_brute_force_on_random_tables() {
        let mut rng = crate::rng::stream(5, "ctc/test");
        for case in 0..60 {
            let t = rng.gen_range(1..=6);
            let v = rng.gen_range(2..=3);
            let max_len = t.min(3);
            let len = rng.gen_range(0..=max_len);
            let labels: Vec<u32> = (0..len).map(|_| rng.gen_range(1..v as u32)).collect();
            if ctc_min_frames(&labels) > t || labels.is_empty() {
                continue;
            }
            let mut logp = vec![0.0; t * v];
            for row in logp.chunks_mut(v) {
                let logits: Vec<f64> = row.iter().map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|&l| (l - mx).exp()).sum();
                for (slot, l) in row.iter_mut().zip(&logits) {
                    *slot = l - mx - z.ln();
                }
            }
            let dp = ctc_loss_value(&logp, t, v, &labels, 0).unwrap();
            let bf = brute_force(&logp, t, v, &labels, 0);
            assert!((dp - bf).abs() <= 1e-9, "case {case}: dp {dp} bf {bf}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vocab = Vocab::new("ab").unwrap();
        let reference = vocab.encode("ab").unwrap();
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(11, "ctc/grad");
        let (t, v) = (5, 4);
        store.register("logits", Tensor::matrix(t, v, (0..t * v).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap(), true).unwrap();
        let ids = vec!["logits".to_string()];
        let build = |s: &ParamStore| -> crate::autodiff::Result<(Graph, NodeId)> {
            let mut g = Graph::new(GraphMode::Eval);
            let logits = g.param(s, "logits")?;
            let logp = g.log_softmax(logits)?;
            let loss = ctc_loss_node(&mut g, logp, &reference, 0).map_err(|_| crate::autodiff::AdError::Invalid("ctc".into()))?;
            Ok((g, loss))
        };
        let err = finite_difference_check(
            &mut store,
            &ids,
            1e-5,
            |s| {
                let (mut g, loss) = build(s)?;
                let value = g.scalar_value(loss);
                let grads: GradMap = g.backward(loss)?;
                Ok((value, grads))
            },
            |s| {
                let (g, loss) = build(s)?;
                Ok(g.scalar_value(loss))
            },
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
