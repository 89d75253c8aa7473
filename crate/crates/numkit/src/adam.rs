//! Adam with bias correction.

use crate::error::{NumError, Result};
use crate::store::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(store: &ParamStore, hyper: AdamHyper) -> Self {
        let m = store
            .ids()
            .iter()
            .map(|&id| vec![0.0; store.value(id).numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            m,
            v,
            step: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.0], &self.v[id.0])
    }

    pub fn load_moments(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        if m.len() != self.m[id.0].len() || v.len() != self.v[id.0].len() {
            return Err(NumError::Contract(
                "adam moment size does not match parameter".into(),
            ));
        }
        self.m[id.0] = m;
        self.v[id.0] = v;
        Ok(())
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// One bias-corrected update over `active`, in place; active grads are
    /// zeroed afterwards. A never-touched active parameter is a contract
    /// error naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, active: &[ParamId]) -> Result<()> {
        for &id in active {
            if !store.touched(id) {
                return Err(NumError::MissingGrad {
                    name: store.name(id).to_string(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamHyper {
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for &id in active {
            let grads = store.grad(id).to_vec();
            let moments_m = &mut self.m[id.0];
            let moments_v = &mut self.v[id.0];
            let data = store.value_mut(id).data_mut();
            for (i, &g) in grads.iter().enumerate() {
                let m = &mut moments_m[i];
                *m = beta1 * *m + (1.0 - beta1) * g;
                let v = &mut moments_v[i];
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        // zero only what we consumed
        for &id in active {
            store.zero_grad(id);
        }
        Ok(())
    }

    pub fn step_all(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids = store.ids();
        self.step(store, lr, &ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup(value: f64) -> (ParamStore, ParamId, AdamState) {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(value)).unwrap();
        let adam = AdamState::new(&store, AdamHyper::default());
        (store, id, adam)
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // bias-corrected first step with g=1: update = lr * g / (|g| + eps)
        let (mut store, id, mut adam) = setup(1.0);
        store.accumulate_grad(id, &[1.0]);
        adam.step_all(&mut store, 1e-4).unwrap();
        let moved = 1.0 - store.value(id).item().unwrap();
        assert!((moved - 1e-4).abs() < 1e-8, "moved {moved}");
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let (mut store, id, mut adam) = setup(0.75);
        store.accumulate_grad(id, &[0.0]);
        adam.step_all(&mut store, 1e-2).unwrap();
        assert_eq!(store.value(id).item().unwrap(), 0.75);
    }

    #[test]
    fn missing_grad_is_contract_error_naming_parameter() {
        let (mut store, _id, mut adam) = setup(0.0);
        let err = adam.step_all(&mut store, 1e-3).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn two_fixed_gradient_steps_are_bit_deterministic() {
        let run = || {
            let (mut store, id, mut adam) = setup(0.3);
            for _ in 0..2 {
                store.accumulate_grad(id, &[0.7]);
                adam.step_all(&mut store, 1e-3).unwrap();
            }
            store.value(id).item().unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grads_zeroed_after_step() {
        let (mut store, id, mut adam) = setup(1.0);
        store.accumulate_grad(id, &[2.0]);
        adam.step_all(&mut store, 1e-3).unwrap();
        assert_eq!(store.grad(id), &[0.0]);
        assert!(!store.touched(id));
    }
}
