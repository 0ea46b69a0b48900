//! Variational pieces: Gaussian KL to the prior (closed form, plus the
//! differentiable graph version) and reparameterised sampling.

use super::{AdaptError, Result, TransformKind};
use crate::autodiff::{Graph, NodeId, Tensor};

/// Diagonal Gaussian prior over a transform vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub mean: Vec<f64>,
    pub dev: Vec<f64>,
}

impl PriorSpec {
    pub fn isotropic(dim: usize, mean: f64, dev: f64) -> Result<Self> {
        if dev <= 0.0 {
            return Err(AdaptError::NonPositiveDeviation(dev));
        }
        Ok(PriorSpec { mean: vec![mean; dim], dev: vec![dev; dim] })
    }

    /// Default priors per transform kind: N(0,1) for LHUC, N(0, hub_dev)
    /// for HUB.
    pub fn default_for(kind: TransformKind, dim: usize, hub_dev: f64) -> Result<Self> {
        match kind {
            TransformKind::Lhuc => PriorSpec::isotropic(dim, 0.0, 1.0),
            TransformKind::Hub => PriorSpec::isotropic(dim, 0.0, hub_dev),
        }
    }
}

/// Closed-form KL(q || p) between diagonal Gaussians:
/// `sum_i ln(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2`.
pub fn kl_to_prior(q_mean: &[f64], q_dev: &[f64], p_mean: &[f64], p_dev: &[f64]) -> Result<f64> {
    assert_eq!(q_mean.len(), q_dev.len());
    assert_eq!(q_mean.len(), p_mean.len());
    assert_eq!(q_mean.len(), p_dev.len());
    let mut total = 0.0;
    for i in 0..q_mean.len() {
        let (mq, sq, mp, sp) = (q_mean[i], q_dev[i], p_mean[i], p_dev[i]);
        if sq <= 0.0 {
            return Err(AdaptError::NonPositiveDeviation(sq));
        }
        if sp <= 0.0 {
            return Err(AdaptError::NonPositiveDeviation(sp));
        }
        total += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
    }
    Ok(total)
}

/// Graph version of [`kl_to_prior`] on (mean, log-dev) parameter nodes, so
/// gradients flow into the posterior.
pub fn kl_node(g: &mut Graph, mean: NodeId, log_dev: NodeId, prior: &PriorSpec) -> Result<NodeId> {
    let dim = g.value(mean).numel();
    if dim != prior.mean.len() {
        return Err(AdaptError::DimMismatch { transform: prior.mean.len(), hidden: dim });
    }
    let ln_sp = g.constant(Tensor::vector(prior.dev.iter().map(|d| d.ln()).collect()));
    let neg_logdev = g.scale(log_dev, -1.0)?;
    let t1 = g.add(ln_sp, neg_logdev)?;

    let two_logdev = g.scale(log_dev, 2.0)?;
    let var = g.exp(two_logdev)?;
    let p_mean = g.constant(Tensor::vector(prior.mean.clone()));
    let diff = g.sub(mean, p_mean)?;
    let diff_sq = g.mul(diff, diff)?;
    let num = g.add(var, diff_sq)?;
    let inv_two_var = g.constant(Tensor::vector(prior.dev.iter().map(|d| 1.0 / (2.0 * d * d)).collect()));
    let t2 = g.mul(num, inv_two_var)?;

    let half = g.constant(Tensor::vector(vec![-0.5; dim]));
    let summand = g.add(t1, t2)?;
    let summand = g.add(summand, half)?;
    Ok(g.sum(summand)?)
}

/// Reparameterised draw: `mean + dev ⊙ eps`.
pub fn sample_transform(mean: &[f64], dev: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mean.len() != eps.len() || mean.len() != dev.len() {
        return Err(AdaptError::DimMismatch { transform: eps.len(), hidden: mean.len() });
    }
    for &d in dev {
        if d <= 0.0 {
            return Err(AdaptError::NonPositiveDeviation(d));
        }
    }
    Ok(mean.iter().zip(dev).zip(eps).map(|((&m, &s), &e)| m + s * e).collect())
}

/// Graph version: `mean + exp(log_dev) ⊙ eps` with gradients flowing to both
/// posterior parameters.
pub fn sample_node(g: &mut Graph, mean: NodeId, log_dev: NodeId, eps: &[f64]) -> Result<NodeId> {
    let dim = g.value(mean).numel();
    if dim != eps.len() {
        return Err(AdaptError::DimMismatch { transform: eps.len(), hidden: dim });
    }
    let dev = g.exp(log_dev)?;
    let e = g.constant(Tensor::vector(eps.to_vec()));
    let scaled = g.mul(dev, e)?;
    Ok(g.add(mean, scaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphMode;
    use rand_distr::{Distribution, StandardNormal};

    /// Quadrature oracle: integrate q(x) ln(q(x)/p(x)) over a wide grid.
    fn kl_quadrature(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
        let lo = (mq - 12.0 * sq).min(mp - 12.0 * sp);
        let hi = (mq + 12.0 * sq).max(mp + 12.0 * sp);
        let n = 200_001;
        let h = (hi - lo) / (n - 1) as f64;
        let logpdf = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let f = |x: f64| {
            let lq = logpdf(x, mq, sq);
            lq.exp() * (lq - logpdf(x, mp, sp))
        };
        // Simpson's rule
        let mut acc = f(lo) + f(hi);
        for i in 1..n - 1 {
            let x = lo + i as f64 * h;
            acc += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn kl_of_q_with_itself_is_zero() {
        assert_eq!(kl_to_prior(&[0.7], &[0.3], &[0.7], &[0.3]).unwrap(), 0.0);
        let v = kl_to_prior(&[0.1, -2.0, 5.0], &[0.5, 1.0, 2.0], &[0.1, -2.0, 5.0], &[0.5, 1.0, 2.0]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn unit_shift_costs_half() {
        let v = kl_to_prior(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert!((kl_quadrature(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn half_deviation_matches_quadrature() {
        let v = kl_to_prior(&[0.0], &[0.5], &[0.0], &[1.0]).unwrap();
        assert!((v - 0.3181471805599453).abs() < 1e-12);
        assert!((v - kl_quadrature(0.0, 0.5, 0.0, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_deviations() {
        assert!(matches!(kl_to_prior(&[0.0], &[0.0], &[0.0], &[1.0]), Err(AdaptError::NonPositiveDeviation(_))));
        assert!(matches!(kl_to_prior(&[0.0], &[1.0], &[0.0], &[-0.5]), Err(AdaptError::NonPositiveDeviation(_))));
    }

    #[test]
    fn kl_node_matches_closed_form() {
        let mut g = Graph::new(GraphMode::Eval);
        let mean = g.constant(Tensor::vector(vec![0.4, -0.2, 1.1]));
        let log_dev = g.constant(Tensor::vector(vec![0.2f64.ln(), 1.0f64.ln(), 0.05f64.ln()]));
        let prior = PriorSpec::isotropic(3, 0.0, 0.7).unwrap();
        let node = kl_node(&mut g, mean, log_dev, &prior).unwrap();
        let expected = kl_to_prior(&[0.4, -0.2, 1.1], &[0.2, 1.0, 0.05], &prior.mean, &prior.dev).unwrap();
        assert!((g.scalar_value(node) - expected).abs() < 1e-12);
    }

    #[test]
    fn sampling_identities() {
        // eps = 0 -> mean
        assert_eq!(sample_transform(&[0.3, -0.7], &[0.5, 0.5], &[0.0, 0.0]).unwrap(), vec![0.3, -0.7]);
        // mu=0, dev=1, eps=0.5 -> 0.5
        assert_eq!(sample_transform(&[0.0], &[1.0], &[0.5]).unwrap(), vec![0.5]);
    }

    #[test]
    fn sample_mean_concentrates() {
        let mut rng = crate::rng::stream(3, "bayes/mc");
        let (mu, dev) = (0.25, 0.8);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            acc += sample_transform(&[mu], &[dev], &[e]).unwrap()[0];
        }
        let mean = acc / n as f64;
        let tol = 3.0 * dev / (n as f64).sqrt();
        assert!((mean - mu).abs() < tol, "mean {mean} vs {mu} (tol {tol})");
    }

    #[test]
    fn posterior_mean_inference_rules() {
        use crate::adapt::{FactorTransform, OwnerType, TransformParam};
        let var = FactorTransform {
            owner_type: OwnerType::Speaker,
            owner_id: "s1".into(),
            kind: TransformKind::Lhuc,
            param: TransformParam::Variational { mean: vec![0.0, 0.0], log_dev: vec![-2.0, -2.0] },
        };
        let inferred = var.posterior_mean_inference();
        assert_eq!(inferred.param, TransformParam::Deterministic { vector: vec![0.0, 0.0] });

        // deviation plays no role: different log_dev, same inference-time vector
        let mut other = var.clone();
        if let TransformParam::Variational { log_dev, .. } = &mut other.param {
            log_dev[0] = 3.0;
        }
        assert_eq!(other.posterior_mean_inference().param, inferred.param);

        // deterministic passes through unchanged
        let det = FactorTransform::identity_deterministic(OwnerType::Env, "e1", TransformKind::Hub, 2);
        assert_eq!(det.posterior_mean_inference(), det);
    }
}
