//! Named parameter storage shared across forward passes.

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::graph::GradMap;
use super::tensor::Tensor;
use super::{AdError, Result};

/// A named tensor with a gradient slot of identical shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered parameter table. Iteration order is registration order,
/// which keeps optimizers and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.params.contains_key(id) {
            return Err(AdError::DuplicateParam { id: id.to_string() });
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.insert(id.to_string(), Parameter { id: id.to_string(), value, grad, trainable });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Parameter> {
        self.params.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.params.get_mut(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.params.contains_key(id)
    }

    pub fn value(&self, id: &str) -> Result<&Tensor> {
        self.params.get(id).map(|p| &p.value).ok_or_else(|| AdError::UnknownParam(id.to_string()))
    }

    pub fn set_value(&mut self, id: &str, value: Tensor) -> Result<()> {
        let p = self.params.get_mut(id).ok_or_else(|| AdError::UnknownParam(id.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(AdError::ShapeMismatch { op: "set_value", lhs: p.value.shape().to_vec(), rhs: value.shape().to_vec() });
        }
        p.value = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Zero every gradient slot.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    /// Add `scale` times the gradients in `map` into the gradient slots.
    pub fn accumulate_grads(&mut self, map: &GradMap, scale: f64) -> Result<()> {
        for (id, g) in map {
            let p = self.params.get_mut(id).ok_or_else(|| AdError::UnknownParam(id.clone()))?;
            if p.grad.shape() != g.shape() {
                return Err(AdError::ShapeMismatch { op: "accumulate_grads", lhs: p.grad.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            for (slot, &v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *slot += scale * v;
            }
        }
        Ok(())
    }

    /// Mark every parameter whose id starts with `prefix` (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.values_mut() {
            if p.id.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// SHA-256 over (id, shape, value bits) of every parameter whose id
    /// starts with `prefix`, in registration order.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.values() {
            if !p.id.starts_with(prefix) {
                continue;
            }
            h.update(p.id.as_bytes());
            h.update([0u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_registration_rejected() {
        let mut s = ParamStore::new();
        s.register("a", Tensor::scalar(1.0), true).unwrap();
        assert!(s.register("a", Tensor::scalar(2.0), true).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::new();
        s.register("model/w", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        s.register("adapt/r", Tensor::vector(vec![0.0]), true).unwrap();
        let before = s.checksum("model/");
        s.set_value("adapt/r", Tensor::vector(vec![5.0])).unwrap();
        assert_eq!(before, s.checksum("model/"));
        s.set_value("model/w", Tensor::vector(vec![1.0, 3.0])).unwrap();
        assert_ne!(before, s.checksum("model/"));
    }

    #[test]
    fn accumulate_respects_scale() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::vector(vec![0.0, 0.0]), true).unwrap();
        let mut map = GradMap::new();
        map.insert("w".into(), Tensor::vector(vec![1.0, 2.0]));
        s.zero_grads();
        s.accumulate_grads(&map, 0.5).unwrap();
        s.accumulate_grads(&map, 0.5).unwrap();
        assert_eq!(s.get("w").unwrap().grad.data(), &[1.0, 2.0]);
    }
}
