//! Named parameter storage shared across tape rebuilds.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    /// Shared with tapes during a step to avoid copying; updates between
    /// steps go through `Arc::make_mut` once every tape is dropped.
    value: Arc<Tensor>,
    grad: Vec<f64>,
    /// Set once any gradient (including an exact zero) was accumulated since
    /// the last `zero_grads`; Adam treats untouched entries as contract
    /// violations when asked to update them.
    touched: bool,
}

/// Registration-ordered parameter table. Order is deterministic, which keeps
/// checkpoints and gradient reductions byte-stable.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(NumError::Contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let grad = vec![0.0; value.numel()];
        let idx = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value: Arc::new(value),
            grad,
            touched: false,
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Cheap handle for binding the parameter onto a tape.
    pub fn value_shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn touched(&self, id: ParamId) -> bool {
        self.entries[id.0].touched
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(ParamId).collect()
    }

    /// (name, value) pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.value.as_ref()))
    }

    pub fn accumulate_grad(&mut self, id: ParamId, contrib: &[f64]) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(e.grad.len(), contrib.len());
        for (g, c) in e.grad.iter_mut().zip(contrib) {
            *g += c;
        }
        e.touched = true;
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            for g in &mut e.grad {
                *g *= factor;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
            e.touched = false;
        }
    }

    pub fn zero_grad(&mut self, id: ParamId) {
        let e = &mut self.entries[id.0];
        e.grad.iter_mut().for_each(|g| *g = 0.0);
        e.touched = false;
    }

    pub fn grad_norm(&self, id: ParamId) -> f64 {
        self.entries[id.0]
            .grad
            .iter()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Overwrites a parameter value (checkpoint restore); shape must match.
    pub fn load_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(NumError::ShapeMismatch {
                op: "load_value",
                lhs: e.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        e.value = Arc::new(value);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert_eq!(s.name(id), "w");
        assert_eq!(s.id("w"), Some(id));
        assert!(s.register("w", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn grad_accumulation_and_zeroing() {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::zeros(vec![2])).unwrap();
        assert!(!s.touched(id));
        s.accumulate_grad(id, &[1.0, 2.0]);
        s.accumulate_grad(id, &[0.5, 0.5]);
        assert_eq!(s.grad(id), &[1.5, 2.5]);
        assert!(s.touched(id));
        s.zero_grads();
        assert_eq!(s.grad(id), &[0.0, 0.0]);
        assert!(!s.touched(id));
    }
}
