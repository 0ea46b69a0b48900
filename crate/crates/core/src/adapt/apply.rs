//! Transform application on the tape. All appliers broadcast a length-D
//! vector over the rows of a (T, D) hidden matrix and preserve its shape.

use super::{AdaptError, Result, TransformKind};
use crate::autodiff::{Graph, NodeId, Tensor};

fn check_dim(g: &Graph, h: NodeId, v: NodeId) -> Result<()> {
    let hd = g.value(h).cols();
    let vd = g.value(v).numel();
    if hd != vd {
        return Err(AdaptError::DimMismatch { transform: vd, hidden: hd });
    }
    Ok(())
}

/// `2 * sigmoid(r)`, the LHUC amplitude scale.
pub fn lhuc_scale_node(g: &mut Graph, r: NodeId) -> Result<NodeId> {
    let s = g.sigmoid(r)?;
    Ok(g.scale(s, 2.0)?)
}

/// `h ⊙ 2*sigmoid(r)`, broadcast over time.
pub fn lhuc_apply(g: &mut Graph, h: NodeId, r: NodeId) -> Result<NodeId> {
    check_dim(g, h, r)?;
    let scale = lhuc_scale_node(g, r)?;
    Ok(g.mul_row(h, scale)?)
}

/// `h + bias`, broadcast over time.
pub fn hub_apply(g: &mut Graph, h: NodeId, bias: NodeId) -> Result<NodeId> {
    check_dim(g, h, bias)?;
    Ok(g.add_row(h, bias)?)
}

/// Linear factorised adaptation: `h ⊙ (β ξ(r) + (1-β) ξ(n))`. At β = 1 or
/// β = 0 this is bit-identical to single-transform LHUC.
pub fn lfa_apply(g: &mut Graph, h: NodeId, r: NodeId, n: NodeId, beta: f64) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(AdaptError::BetaOutOfRange(beta));
    }
    check_dim(g, h, r)?;
    check_dim(g, h, n)?;
    let sr = g.sigmoid(r)?;
    let spk = g.scale(sr, 2.0 * beta)?;
    let sn = g.sigmoid(n)?;
    let env = g.scale(sn, 2.0 * (1.0 - beta))?;
    let mix = g.add(spk, env)?;
    Ok(g.mul_row(h, mix)?)
}

/// Cascaded factorised adaptation: speaker transform first, environment
/// transform on the result. LHUC factors compose multiplicatively, HUB
/// factors additively, so the HUB-HUB case collapses to one summed-bias HUB
/// and the LHUC-LHUC case to one product-scale LHUC application.
pub fn cfa_apply(g: &mut Graph, h: NodeId, r: NodeId, spk_kind: TransformKind, n: NodeId, env_kind: TransformKind) -> Result<NodeId> {
    check_dim(g, h, r)?;
    check_dim(g, h, n)?;
    use TransformKind::*;
    match (spk_kind, env_kind) {
        (Lhuc, Lhuc) => {
            let xr = lhuc_scale_node(g, r)?;
            let xn = lhuc_scale_node(g, n)?;
            let scale = g.mul(xr, xn)?;
            Ok(g.mul_row(h, scale)?)
        }
        (Hub, Hub) => {
            let bias = g.add(r, n)?;
            Ok(g.add_row(h, bias)?)
        }
        (Lhuc, Hub) => {
            let scaled = lhuc_apply(g, h, r)?;
            Ok(g.add_row(scaled, n)?)
        }
        (Hub, Lhuc) => {
            let shifted = g.add_row(h, r)?;
            let xn = lhuc_scale_node(g, n)?;
            Ok(g.mul_row(shifted, xn)?)
        }
    }
}

/// Concrete transform values for a decode pass, applied as constants.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformValues {
    None,
    Single { kind: TransformKind, vector: Vec<f64> },
    Lfa { beta: f64, speaker: Vec<f64>, env: Vec<f64> },
    Cfa { spk_kind: TransformKind, env_kind: TransformKind, speaker: Vec<f64>, env: Vec<f64> },
}

impl TransformValues {
    pub fn apply(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        match self {
            TransformValues::None => Ok(h),
            TransformValues::Single { kind, vector } => {
                let v = g.constant(Tensor::vector(vector.clone()));
                match kind {
                    TransformKind::Lhuc => lhuc_apply(g, h, v),
                    TransformKind::Hub => hub_apply(g, h, v),
                }
            }
            TransformValues::Lfa { beta, speaker, env } => {
                let r = g.constant(Tensor::vector(speaker.clone()));
                let n = g.constant(Tensor::vector(env.clone()));
                lfa_apply(g, h, r, n, *beta)
            }
            TransformValues::Cfa { spk_kind, env_kind, speaker, env } => {
                let r = g.constant(Tensor::vector(speaker.clone()));
                let n = g.constant(Tensor::vector(env.clone()));
                cfa_apply(g, h, r, *spk_kind, n, *env_kind)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphMode;

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn lhuc_identity_at_zero() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -0.25]));
        let r = g.constant(Tensor::vector(vec![0.0; 3]));
        let out = lhuc_apply(&mut g, h, r).unwrap();
        assert_eq!(g.value(out).data(), g.value(h).data());
    }

    #[test]
    fn lhuc_saturates_at_two() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(1, 2, vec![1.0, 2.0]));
        let r = g.constant(Tensor::vector(vec![20.0, 20.0]));
        let out = lhuc_apply(&mut g, h, r).unwrap();
        assert!((g.value(out).data()[0] - 2.0).abs() < 1e-8);
        assert!((g.value(out).data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn lhuc_ln3_gives_three_halves_scale() {
        // 2*sigmoid(ln 3) = 2 * 3/4 = 1.5
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(1, 1, vec![2.0]));
        let r = g.constant(Tensor::vector(vec![3f64.ln()]));
        let out = lhuc_apply(&mut g, h, r).unwrap();
        assert!((g.value(out).data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hub_adds_and_composes_additively() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(1, 2, vec![1.0, -1.0]));
        let b = g.constant(Tensor::vector(vec![0.5, 0.5]));
        let out = hub_apply(&mut g, h, b).unwrap();
        assert_eq!(g.value(out).data(), &[1.5, -0.5]);

        // hub(hub(h,a),b) = hub(h,a+b)
        let a = g.constant(Tensor::vector(vec![0.25, -0.75]));
        let twice = {
            let t = hub_apply(&mut g, h, a).unwrap();
            hub_apply(&mut g, t, b).unwrap()
        };
        let summed = {
            let s = g.add(a, b).unwrap();
            hub_apply(&mut g, h, s).unwrap()
        };
        assert_eq!(g.value(twice).data(), g.value(summed).data());
    }

    #[test]
    fn hub_identity_at_zero() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(2, 2, vec![0.5, -0.5, 1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let out = hub_apply(&mut g, h, b).unwrap();
        assert_eq!(g.value(out).data(), g.value(h).data());
    }

    #[test]
    fn lfa_boundaries_are_bit_identical_to_lhuc() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(2, 2, vec![0.3, -1.7, 2.2, 0.9]));
        let r = g.constant(Tensor::vector(vec![0.4, -0.8]));
        let n = g.constant(Tensor::vector(vec![-1.1, 0.6]));

        let at_one = lfa_apply(&mut g, h, r, n, 1.0).unwrap();
        let lhuc_r = lhuc_apply(&mut g, h, r).unwrap();
        assert_eq!(g.value(at_one).data(), g.value(lhuc_r).data());

        let at_zero = lfa_apply(&mut g, h, r, n, 0.0).unwrap();
        let lhuc_n = lhuc_apply(&mut g, h, n).unwrap();
        assert_eq!(g.value(at_zero).data(), g.value(lhuc_n).data());
    }

    #[test]
    fn lfa_with_equal_factors_collapses() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(1, 3, vec![1.0, -2.0, 0.5]));
        let r = g.constant(Tensor::vector(vec![0.3, 0.0, -0.9]));
        for beta in [0.25, 0.5, 0.7] {
            let mixed = lfa_apply(&mut g, h, r, r, beta).unwrap();
            let single = lhuc_apply(&mut g, h, r).unwrap();
            let (a, b) = (g.value(mixed).data(), g.value(single).data());
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15, "beta {beta}");
            }
        }
    }

    #[test]
    fn lfa_rejects_bad_beta() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(1, 1, vec![1.0]));
        let r = g.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(lfa_apply(&mut g, h, r, r, 1.5), Err(AdaptError::BetaOutOfRange(_))));
    }

    #[test]
    fn cfa_identity_pairs_pass_hidden_through() {
        use TransformKind::*;
        for (sk, ek) in [(Lhuc, Lhuc), (Hub, Hub), (Lhuc, Hub), (Hub, Lhuc)] {
            let mut g = Graph::new(GraphMode::Eval);
            let h = g.constant(mat(2, 2, vec![0.7, -0.2, 1.5, -3.0]));
            let r = g.constant(Tensor::vector(vec![0.0, 0.0]));
            let n = g.constant(Tensor::vector(vec![0.0, 0.0]));
            let out = cfa_apply(&mut g, h, r, sk, n, ek).unwrap();
            assert_eq!(g.value(out).data(), g.value(h).data(), "{sk:?}/{ek:?}");
        }
    }

    #[test]
    fn cfa_hub_hub_equals_single_summed_bias_bitwise() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(1, 1, vec![1.0]));
        let r = g.constant(Tensor::vector(vec![0.2]));
        let n = g.constant(Tensor::vector(vec![0.3]));
        let cfa = cfa_apply(&mut g, h, r, TransformKind::Hub, n, TransformKind::Hub).unwrap();
        assert_eq!(g.value(cfa).data(), &[1.5]);
        let summed = g.add(r, n).unwrap();
        let single = hub_apply(&mut g, h, summed).unwrap();
        assert_eq!(g.value(cfa).data(), g.value(single).data());
    }

    #[test]
    fn cfa_lhuc_hub_with_identity_speaker_reduces_to_hub() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(1, 1, vec![1.0]));
        let r = g.constant(Tensor::vector(vec![0.0]));
        let n = g.constant(Tensor::vector(vec![0.3]));
        let out = cfa_apply(&mut g, h, r, TransformKind::Lhuc, n, TransformKind::Hub).unwrap();
        assert_eq!(g.value(out).data(), &[1.3]);
    }

    #[test]
    fn cfa_lhuc_lhuc_identity_factor_collapses_generic_does_not() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(1, 2, vec![1.0, -2.0]));
        let r = g.constant(Tensor::vector(vec![0.7, -0.3]));
        let zero = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let cascade = cfa_apply(&mut g, h, r, TransformKind::Lhuc, zero, TransformKind::Lhuc).unwrap();
        let single = lhuc_apply(&mut g, h, r).unwrap();
        assert_eq!(g.value(cascade).data(), g.value(single).data());

        // generic non-identity pair differs from any single application of
        // either factor
        let n = g.constant(Tensor::vector(vec![0.4, 1.2]));
        let generic = cfa_apply(&mut g, h, r, TransformKind::Lhuc, n, TransformKind::Lhuc).unwrap();
        let single_r = lhuc_apply(&mut g, h, r).unwrap();
        let single_n = lhuc_apply(&mut g, h, n).unwrap();
        assert_ne!(g.value(generic).data(), g.value(single_r).data());
        assert_ne!(g.value(generic).data(), g.value(single_n).data());
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(2, 3, vec![0.0; 6]));
        let r = g.constant(Tensor::vector(vec![0.0; 4]));
        assert!(matches!(lhuc_apply(&mut g, h, r), Err(AdaptError::DimMismatch { transform: 4, hidden: 3 })));
        assert!(matches!(hub_apply(&mut g, h, r), Err(AdaptError::DimMismatch { .. })));
    }

    #[test]
    fn all_appliers_preserve_shape() {
        let mut g = Graph::new(GraphMode::Eval);
        let h = g.constant(mat(4, 3, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()));
        let r = g.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
        let n = g.constant(Tensor::vector(vec![0.5, 0.0, -0.5]));
        for out in [
            lhuc_apply(&mut g, h, r).unwrap(),
            hub_apply(&mut g, h, r).unwrap(),
            lfa_apply(&mut g, h, r, n, 0.7).unwrap(),
            cfa_apply(&mut g, h, r, TransformKind::Hub, n, TransformKind::Lhuc).unwrap(),
        ] {
            assert_eq!(g.value(out).shape(), &[4, 3]);
        }
    }
}
