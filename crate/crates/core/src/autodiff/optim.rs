//! Optimizers over a [`ParamStore`].

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; 0 disables.
    pub clip_norm: f64,
    /// Noam warmup steps; 0 selects the fixed learning rate `lr`.
    pub noam_warmup: usize,
    /// Noam scale factor (the "initial learning rate" knob of the schedule).
    pub noam_scale: f64,
    /// Model dim for the Noam schedule.
    pub noam_dim: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_norm: 5.0, noam_warmup: 0, noam_scale: 5.0, noam_dim: 64 }
    }
}

/// Adam with optional Noam learning-rate schedule.
pub struct Adam {
    cfg: AdamConfig,
    step: usize,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    fn lr(&self) -> f64 {
        if self.cfg.noam_warmup == 0 {
            return self.cfg.lr;
        }
        let s = self.step as f64;
        let w = self.cfg.noam_warmup as f64;
        self.cfg.noam_scale * (self.cfg.noam_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }

    /// One update over every trainable parameter using the gradients
    /// currently stored in the `ParamStore`. Non-trainable parameters are
    /// never touched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let lr = self.lr();

        if self.cfg.clip_norm > 0.0 {
            let mut sq = 0.0;
            for p in store.iter() {
                if p.trainable {
                    sq += p.grad.data().iter().map(|g| g * g).sum::<f64>();
                }
            }
            let norm = sq.sqrt();
            if norm > self.cfg.clip_norm {
                let scale = self.cfg.clip_norm / norm;
                for p in store.iter_mut() {
                    if p.trainable {
                        for g in p.grad.data_mut() {
                            *g *= scale;
                        }
                    }
                }
            }
        }

        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let m = self.m.entry(p.id.clone()).or_insert_with(|| vec![0.0; p.value.numel()]);
            let v = self.v.entry(p.id.clone()).or_insert_with(|| vec![0.0; p.value.numel()]);
            let grad = p.grad.data().to_vec();
            for ((w, g), (mi, vi)) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * g;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Apply `value -= lr * grad` to the listed parameters, returning the
/// previous values so a rejected step can be rolled back.
pub fn gd_step(store: &mut ParamStore, ids: &[String], lr: f64) -> Vec<(String, Tensor)> {
    let mut saved = Vec::with_capacity(ids.len());
    for id in ids {
        let p = store.get_mut(id).expect("gd_step: unknown parameter");
        if !p.trainable {
            continue;
        }
        saved.push((id.clone(), p.value.clone()));
        let grad = p.grad.data().to_vec();
        for (w, g) in p.value.data_mut().iter_mut().zip(grad) {
            *w -= lr * g;
        }
    }
    saved
}

/// Restore values captured by [`gd_step`].
pub fn gd_rollback(store: &mut ParamStore, saved: Vec<(String, Tensor)>) {
    for (id, value) in saved {
        store.set_value(&id, value).expect("gd_rollback: unknown parameter");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, GraphMode};

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::vector(vec![3.0, -2.0]), true).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let mut g = Graph::new(GraphMode::Eval);
            let w = g.param(&store, "w").unwrap();
            let sq = g.mul(w, w).unwrap();
            let loss = g.sum(sq).unwrap();
            let val = g.scalar_value(loss);
            let grads = g.backward(loss).unwrap();
            store.zero_grads();
            store.accumulate_grads(&grads, 1.0).unwrap();
            opt.step(&mut store);
            last = val;
        }
        assert!(last < 1e-3, "final loss {last}");
    }

    #[test]
    fn non_trainable_is_never_touched() {
        let mut store = ParamStore::new();
        store.register("frozen", Tensor::scalar(7.0), false).unwrap();
        let g = store.get_mut("frozen").unwrap();
        g.grad = Tensor::scalar(100.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut store);
        assert_eq!(store.value("frozen").unwrap().item(), 7.0);
    }

    #[test]
    fn gd_rollback_restores() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(1.0), true).unwrap();
        store.get_mut("w").unwrap().grad = Tensor::scalar(10.0);
        let saved = gd_step(&mut store, &["w".to_string()], 0.1);
        assert!((store.value("w").unwrap().item() - 0.0).abs() < 1e-12);
        gd_rollback(&mut store, saved);
        assert_eq!(store.value("w").unwrap().item(), 1.0);
    }
}
