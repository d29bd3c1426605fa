use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::Fnv;
use super::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Globally unique parameter handle: store identity plus slot.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub id: ParamId,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    value: Arc<Tensor>,
    pub requires_grad: bool,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// An ordered, named collection of parameter tensors.
///
/// Values sit behind `Arc` so graphs can reference them without copying;
/// mutation goes through copy-on-write.
#[derive(Clone, Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed), params: Vec::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value: Arc::new(value), requires_grad });
        ParamId(self.params.len() - 1)
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { store: self.uid, id }
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = Arc::new(value);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].requires_grad = flag;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.requires_grad = false;
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.params.iter().filter(|p| p.requires_grad).map(|p| p.value.numel()).sum()
    }

    /// Hash over every name and value bit pattern, in slot order.
    pub fn bit_hash(&self) -> u64 {
        let mut h = Fnv::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            h.write(&p.value.bit_hash().to_le_bytes());
        }
        h.finish()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| (*p.value).clone()).collect()
    }

    pub fn restore(&mut self, values: Vec<Tensor>) {
        assert_eq!(values.len(), self.params.len(), "snapshot from a different store");
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = Arc::new(v);
        }
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.map.get(&key)
    }

    pub fn for_param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.map.get(&store.key(id))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.map.keys()
    }

    pub(crate) fn accumulate(&mut self, key: ParamKey, grad: Tensor) {
        match self.map.get_mut(&key) {
            Some(g) => g.add_assign(&grad),
            None => {
                self.map.insert(key, grad);
            }
        }
    }

    /// Adds another gradient map into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (k, g) in other.map {
            self.accumulate(k, g);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.map.values_mut() {
            g.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale((max_norm / norm) as f32);
        }
        norm
    }
}
