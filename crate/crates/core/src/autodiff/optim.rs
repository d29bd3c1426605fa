use serde::{Deserialize, Serialize};

use super::{AutodiffError, Gradients, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled (AdamW-style) decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam moments for one [`ParamStore`], indexed by slot.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable parameter that has a
    /// gradient; decay is `p *= 1 - lr * weight_decay` before the Adam move.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), AutodiffError> {
        if !(lr >= 0.0) {
            return Err(AutodiffError::Invalid(format!("adam: learning rate {lr} must be non-negative")));
        }
        let mut updates = Vec::new();
        for (id, p) in store.iter() {
            if !p.requires_grad {
                continue;
            }
            if let Some(g) = grads.for_param(store, id) {
                if g.shape() != p.value().shape() {
                    return Err(AutodiffError::Shape {
                        op: "adam_step",
                        detail: format!("{}: grad {:?} vs param {:?}", p.name, g.shape(), p.value().shape()),
                    });
                }
                updates.push(id);
            }
        }
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = (1.0 - lr * c.weight_decay) as f32;
        for id in updates {
            let g = grads.for_param(store, id).expect("checked above");
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()) {
                *mi = (c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi as f64) as f32;
                *vi = (c.beta2 * *vi as f64 + (1.0 - c.beta2) * (gi as f64) * (gi as f64)) as f32;
            }
            let (m, v) = (self.m[id.0].as_ref().unwrap(), self.v[id.0].as_ref().unwrap());
            let p = store.get_mut(id);
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi as f64 / bc1;
                let vhat = vi as f64 / bc2;
                if c.weight_decay != 0.0 {
                    *pi *= decay;
                }
                *pi -= (lr * mhat / (vhat.sqrt() + c.epsilon)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn grads_for(store: &ParamStore, g_vals: &[f32]) -> Gradients {
        // loss = sum(g ⊙ p) has gradient g
        let mut g = Graph::new();
        let coef = g.constant(Tensor::new(vec![g_vals.len()], g_vals.to_vec()).unwrap());
        let p = g.param(store, crate::autodiff::ParamId(0));
        let prod = g.mul(p, coef).unwrap();
        let l = g.sum_all(prod).unwrap();
        g.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::full(&[3], 0.7), true);
        let grads = grads_for(&store, &[0.0, 0.0, 0.0]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.get(crate::autodiff::ParamId(0)).data(), &[0.7, 0.7, 0.7]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn single_step_moves_by_lr() {
        // m̂ = g = 1, v̂ = g² = 1, so the move is lr / (1 + eps) ≈ 0.1
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(2.0), true);
        let grads = grads_for(&store, &[1.0]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut store, &grads, 0.1).unwrap();
        let p = store.get(crate::autodiff::ParamId(0)).item();
        assert!((p - 1.9).abs() < 1e-6, "{p}");
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::full(&[2], 0.3), true);
        let grads = grads_for(&store, &[0.25, 0.25]);
        let mut adam = AdamState::new(AdamConfig { weight_decay: 0.1, ..Default::default() });
        for _ in 0..3 {
            adam.step(&mut store, &grads, 0.05).unwrap();
        }
        let d = store.get(crate::autodiff::ParamId(0)).data();
        assert_eq!(d[0].to_bits(), d[1].to_bits());
    }

    #[test]
    fn negative_lr_rejected() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0), true);
        let grads = grads_for(&store, &[1.0]);
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(adam.step(&mut store, &grads, -1e-3).is_err());
    }

    #[test]
    fn frozen_params_never_move() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0), true);
        let grads = grads_for(&store, &[1.0]);
        store.freeze_all();
        let before = store.bit_hash();
        let mut adam = AdamState::new(AdamConfig { weight_decay: 0.1, ..Default::default() });
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(before, store.bit_hash());
    }
}
