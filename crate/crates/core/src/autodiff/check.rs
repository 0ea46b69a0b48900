//! Finite-difference verification of analytic gradients.

use thiserror::Error;

use super::graph::GradMap;
use super::params::ParamStore;
use super::Result as AdResult;

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error("loss is not deterministic under a fixed seed: {0} vs {1}")]
    NonDeterministic(f64, f64),
    #[error("loss evaluation failed: {0}")]
    Eval(#[from] super::AdError),
}

/// Compare analytic gradients against central finite differences.
///
/// `loss_and_grad` evaluates the loss and its analytic gradients at the
/// current parameter values; `loss_only` evaluates just the loss. Both must
/// be deterministic (any internal sampling fixed by seed). Returns the
/// maximum over all entries of all parameters in `ids` of
/// `|analytic - central| / max(1e-8, |central|)`. A model with no checked
/// parameter entries yields 0.
pub fn finite_difference_check(
    store: &mut ParamStore,
    ids: &[String],
    step: f64,
    mut loss_and_grad: impl FnMut(&ParamStore) -> AdResult<(f64, GradMap)>,
    mut loss_only: impl FnMut(&ParamStore) -> AdResult<f64>,
) -> std::result::Result<f64, CheckError> {
    if step <= 0.0 {
        return Err(CheckError::BadStep(step));
    }
    let l0 = loss_only(store)?;
    let l1 = loss_only(store)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(CheckError::NonDeterministic(l0, l1));
    }
    let (_, grads) = loss_and_grad(store)?;

    let mut worst: f64 = 0.0;
    for id in ids {
        let n = store.value(id)?.numel();
        for i in 0..n {
            let orig = store.value(id)?.data()[i];
            let analytic = grads.get(id).map(|g| g.data()[i]).unwrap_or(0.0);

            set_entry(store, id, i, orig + step)?;
            let plus = loss_only(store)?;
            set_entry(store, id, i, orig - step)?;
            let minus = loss_only(store)?;
            set_entry(store, id, i, orig)?;

            let central = (plus - minus) / (2.0 * step);
            let rel = (analytic - central).abs() / central.abs().max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

fn set_entry(store: &mut ParamStore, id: &str, i: usize, v: f64) -> AdResult<()> {
    let p = store.get_mut(id).ok_or_else(|| super::AdError::UnknownParam(id.to_string()))?;
    p.value.data_mut()[i] = v;
    Ok(())
}
