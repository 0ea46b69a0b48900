//! Token error rate scoring via edit-distance alignment, with per-condition
//! breakdowns.
//!
//! The scorer is token-agnostic: anything comparable can be aligned. Error
//! rates are always computed from summed counts, never by averaging
//! per-utterance percentages.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("reference set has zero tokens; error rate undefined")]
    EmptyReference,
}

/// One alignment step. `Match` is kept so the alignment replays both
/// sequences; it contributes no error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// Result of aligning a hypothesis against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Alignment steps in reference order.
    pub ops: Vec<AlignOp>,
}

impl AlignmentResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimal-cost alignment with unit costs. On cost ties the backtrace
/// prefers substitution, then deletion, then insertion.
pub fn edit_align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> AlignmentResult {
    let r = reference.len();
    let h = hypothesis.len();
    let w = h + 1;
    let mut dist = vec![0usize; (r + 1) * w];
    for j in 0..=h {
        dist[j] = j;
    }
    for i in 1..=r {
        dist[i * w] = i;
        for j in 1..=h {
            let sub = dist[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dist[(i - 1) * w + j] + 1;
            let ins = dist[i * w + j - 1] + 1;
            dist[i * w + j] = sub.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(r.max(h));
    let (mut i, mut j) = (r, h);
    let (mut subs, mut dels, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = dist[i * w + j];
        if i > 0 && j > 0 {
            let diag_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dist[(i - 1) * w + j - 1] + diag_cost == here {
                if diag_cost == 1 {
                    subs += 1;
                    ops.push(AlignOp::Substitute);
                } else {
                    ops.push(AlignOp::Match);
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[(i - 1) * w + j] + 1 == here {
            dels += 1;
            ops.push(AlignOp::Delete);
            i -= 1;
            continue;
        }
        ins += 1;
        ops.push(AlignOp::Insert);
        j -= 1;
    }
    ops.reverse();
    AlignmentResult { substitutions: subs, deletions: dels, insertions: ins, ops }
}

/// Summed error counts for one or more utterances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_tokens: usize,
}

impl ErrorCounts {
    pub fn from_alignment(a: &AlignmentResult, reference_tokens: usize) -> Self {
        ErrorCounts { substitutions: a.substitutions, deletions: a.deletions, insertions: a.insertions, reference_tokens }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_tokens += other.reference_tokens;
    }
}

/// 100 * (S+D+I) / N_ref.
pub fn wer_percent(counts: &ErrorCounts) -> Result<f64, ScoreError> {
    if counts.reference_tokens == 0 {
        return Err(ScoreError::EmptyReference);
    }
    Ok(100.0 * counts.errors() as f64 / counts.reference_tokens as f64)
}

/// Per-utterance scoring input: tokens plus the grouping axes it belongs to
/// (axis name -> value, e.g. "env" -> "white@5").
#[derive(Debug, Clone)]
pub struct ScoredUtterance {
    pub utt_id: String,
    pub counts: ErrorCounts,
    pub groups: BTreeMap<String, String>,
}

/// Aggregate report: overall counts plus counts per (axis, group value).
#[derive(Debug, Clone, Default)]
pub struct ScoreReport {
    pub utterances: Vec<ScoredUtterance>,
    pub total: ErrorCounts,
    pub groups: BTreeMap<String, BTreeMap<String, ErrorCounts>>,
}

impl ScoreReport {
    pub fn build(utterances: Vec<ScoredUtterance>) -> Self {
        let mut total = ErrorCounts::default();
        let mut groups: BTreeMap<String, BTreeMap<String, ErrorCounts>> = BTreeMap::new();
        for u in &utterances {
            total.add(&u.counts);
            for (axis, value) in &u.groups {
                groups.entry(axis.clone()).or_default().entry(value.clone()).or_default().add(&u.counts);
            }
        }
        ScoreReport { utterances, total, groups }
    }

    pub fn overall_wer(&self) -> Result<f64, ScoreError> {
        wer_percent(&self.total)
    }

    /// Percentile bootstrap confidence interval over utterances for the
    /// overall error rate. This substitutes for the MAPSSWE significance
    /// test and is labeled as such wherever it is printed.
    pub fn bootstrap_ci(&self, iterations: usize, seed: u64, alpha: f64) -> Result<(f64, f64), ScoreError> {
        if self.total.reference_tokens == 0 {
            return Err(ScoreError::EmptyReference);
        }
        let mut rng = crate::rng::stream(seed, "score/bootstrap");
        let n = self.utterances.len();
        let mut samples = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let mut counts = ErrorCounts::default();
            for _ in 0..n {
                let pick = rng.gen_range(0..n);
                counts.add(&self.utterances[pick].counts);
            }
            if counts.reference_tokens > 0 {
                samples.push(wer_percent(&counts)?);
            }
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo_idx = ((alpha / 2.0) * samples.len() as f64) as usize;
        let hi_idx = (((1.0 - alpha / 2.0) * samples.len() as f64) as usize).min(samples.len() - 1);
        Ok((samples[lo_idx], samples[hi_idx]))
    }

    /// Aligned-column text rendering.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let wer = self.overall_wer().map(|w| format!("{w:.2}")).unwrap_or_else(|_| "n/a".into());
        out.push_str(&format!(
            "overall: wer {wer}%  S {} D {} I {}  ref-tokens {}  utts {}\n",
            self.total.substitutions,
            self.total.deletions,
            self.total.insertions,
            self.total.reference_tokens,
            self.utterances.len()
        ));
        for (axis, values) in &self.groups {
            out.push_str(&format!("by {axis}:\n"));
            for (value, c) in values {
                let wer = wer_percent(c).map(|w| format!("{w:.2}")).unwrap_or_else(|_| "n/a".into());
                out.push_str(&format!("  {value:<24} wer {wer:>7}%  S {:>5} D {:>5} I {:>5}  ref {:>6}\n", c.substitutions, c.deletions, c.insertions, c.reference_tokens));
            }
        }
        out
    }

    /// Machine-readable tab-delimited rendering: one line per group plus an
    /// overall line.
    pub fn render_delimited(&self) -> String {
        let mut out = String::from("axis\tgroup\twer\tsubs\tdels\tins\tref_tokens\n");
        let push = |out: &mut String, axis: &str, group: &str, c: &ErrorCounts| {
            let wer = wer_percent(c).map(|w| format!("{w:.6}")).unwrap_or_else(|_| "nan".into());
            out.push_str(&format!("{axis}\t{group}\t{wer}\t{}\t{}\t{}\t{}\n", c.substitutions, c.deletions, c.insertions, c.reference_tokens));
        };
        push(&mut out, "overall", "all", &self.total);
        for (axis, values) in &self.groups {
            for (value, c) in values {
                push(&mut out, axis, value, c);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: exhaustive recursive minimum edit distance.
    fn brute_distance<T: PartialEq>(r: &[T], h: &[T]) -> usize {
        if r.is_empty() {
            return h.len();
        }
        if h.is_empty() {
            return r.len();
        }
        let sub = brute_distance(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
        let del = brute_distance(&r[1..], h) + 1;
        let ins = brute_distance(r, &h[1..]) + 1;
        sub.min(del).min(ins)
    }

    fn replay(ops: &[AlignOp], reference: &[u8], hypothesis: &[u8]) -> bool {
        let (mut i, mut j) = (0usize, 0usize);
        for op in ops {
            match op {
                AlignOp::Match => {
                    if reference.get(i) != hypothesis.get(j) {
                        return false;
                    }
                    i += 1;
                    j += 1;
                }
                AlignOp::Substitute => {
                    i += 1;
                    j += 1;
                }
                AlignOp::Delete => i += 1,
                AlignOp::Insert => j += 1,
            }
        }
        i == reference.len() && j == hypothesis.len()
    }

    #[test]
    fn identical_sequences_have_no_errors() {
        let a = edit_align(b"abc", b"abc");
        assert_eq!((a.substitutions, a.deletions, a.insertions), (0, 0, 0));
    }

    #[test]
    fn single_deletion() {
        // ref "a b c", hyp "a c"
        let a = edit_align(&["a", "b", "c"], &["a", "c"]);
        assert_eq!((a.substitutions, a.deletions, a.insertions), (0, 1, 0));
    }

    #[test]
    fn empty_reference_counts_insertions() {
        let a = edit_align::<&str>(&[], &["x", "y"]);
        assert_eq!((a.substitutions, a.deletions, a.insertions), (0, 0, 2));
    }

    #[test]
    fn wer_examples() {
        let a = edit_align(&["a", "b", "c"], &["a", "c"]);
        let c = ErrorCounts::from_alignment(&a, 3);
        assert!((wer_percent(&c).unwrap() - 33.333333333).abs() < 1e-6);

        let perfect = ErrorCounts::from_alignment(&edit_align(b"ab", b"ab"), 2);
        assert_eq!(wer_percent(&perfect).unwrap(), 0.0);

        let all_del = ErrorCounts::from_alignment(&edit_align(&["a", "b", "c"], &[]), 3);
        assert_eq!(wer_percent(&all_del).unwrap(), 100.0);
    }

    #[test]
    fn zero_reference_tokens_is_an_error() {
        let c = ErrorCounts::default();
        assert_eq!(wer_percent(&c), Err(ScoreError::EmptyReference));
    }

    #[test]
    fn backtrace_prefers_substitution() {
        // "a" vs "b": one substitution, not delete+insert.
        let a = edit_align(b"a", b"b");
        assert_eq!(a.ops, vec![AlignOp::Substitute]);
    }

    #[test]
    fn group_aggregation_identity() {
        let mk = |id: &str, errs: usize, toks: usize, env: &str| ScoredUtterance {
            utt_id: id.into(),
            counts: ErrorCounts { substitutions: errs, deletions: 0, insertions: 0, reference_tokens: toks },
            groups: BTreeMap::from([("env".to_string(), env.to_string())]),
        };
        let report = ScoreReport::build(vec![mk("u1", 1, 10, "e1"), mk("u2", 2, 5, "e2"), mk("u3", 0, 7, "e1")]);
        let group_sum: usize = report.groups["env"].values().map(|c| c.errors()).sum();
        let token_sum: usize = report.groups["env"].values().map(|c| c.reference_tokens).sum();
        assert_eq!(group_sum, report.total.errors());
        assert_eq!(token_sum, report.total.reference_tokens);
        // token-weighted combination of group rates equals the overall rate
        let combined: f64 = report.groups["env"]
            .values()
            .map(|c| wer_percent(c).unwrap() * c.reference_tokens as f64)
            .sum::<f64>()
            / report.total.reference_tokens as f64;
        let overall = report.overall_wer().unwrap();
        assert!((combined - overall).abs() / overall.max(1e-12) < 1e-12);
    }

    proptest! {
        #[test]
        fn distance_matches_brute_force(r in proptest::collection::vec(0u8..4, 0..8), h in proptest::collection::vec(0u8..4, 0..8)) {
            let a = edit_align(&r, &h);
            prop_assert_eq!(a.errors(), brute_distance(&r, &h));
            prop_assert!(replay(&a.ops, &r, &h));
        }

        #[test]
        fn self_alignment_is_perfect(r in proptest::collection::vec(0u8..6, 0..12)) {
            let a = edit_align(&r, &r);
            prop_assert_eq!(a.errors(), 0);
        }

        #[test]
        fn swap_is_symmetric_in_error_count(r in proptest::collection::vec(0u8..4, 0..8), h in proptest::collection::vec(0u8..4, 0..8)) {
            // Error count is symmetric; deletions and insertions exchange
            // roles, visible through the length identity D - I = |ref| - |hyp|
            // holding on both orientations. The exact S/D/I split of a
            // minimal alignment is not unique, so it is not asserted.
            let fwd = edit_align(&r, &h);
            let rev = edit_align(&h, &r);
            prop_assert_eq!(fwd.errors(), rev.errors());
            prop_assert_eq!(fwd.deletions as isize - fwd.insertions as isize, r.len() as isize - h.len() as isize);
            prop_assert_eq!(rev.deletions as isize - rev.insertions as isize, h.len() as isize - r.len() as isize);
        }
    }
}
