use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{projection_dims, Backbone};
use super::BackboneError;
use crate::autodiff::{normal, ParamId, ParamStore, Tensor};

/// Adaptable projections of each decoder layer, in slot order.
pub const PROJECTIONS: &[&str] = &["q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f32,
    pub dropout: f32,
    pub targets: Vec<String>,
    pub init_std: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 16,
            alpha: 16.0,
            dropout: 0.05,
            targets: vec!["gate_proj".into(), "down_proj".into(), "up_proj".into()],
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule {
    pub layer: usize,
    pub target: String,
    pub slot: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub a: ParamId,
    pub b: ParamId,
}

/// Low-rank deltas `(alpha / r) * (x A) B` for the targeted projections of
/// every layer. `B` starts at zero, so a fresh adapter changes nothing.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub store: ParamStore,
    pub modules: Vec<LoraModule>,
    d_model: usize,
    /// `[layer][slot]` -> index into `modules`.
    lookup: Vec<[Option<usize>; 7]>,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f32 {
        self.config.alpha / self.config.r as f32
    }

    pub fn module(&self, layer: usize, slot: usize) -> Option<(&Self, &LoraModule)> {
        let idx = self.lookup.get(layer)?[slot]?;
        Some((self, &self.modules[idx]))
    }

    /// `Σ r (d_in + d_out)` over all adapted projections.
    pub fn num_parameters(&self) -> usize {
        self.modules.iter().map(|m| self.config.r * (m.d_in + m.d_out)).sum()
    }

    /// Stable identity of the current adapter values.
    pub fn fingerprint(&self) -> u64 {
        self.store.bit_hash()
    }

    pub fn check_compatible(&self, backbone: &Backbone) -> Result<(), BackboneError> {
        if self.d_model != backbone.d_model() || self.lookup.len() != backbone.layers.len() {
            return Err(BackboneError::AdapterMismatch(format!(
                "adapter built for {} layers of width {}, backbone has {} of width {}",
                self.lookup.len(),
                self.d_model,
                backbone.layers.len(),
                backbone.d_model()
            )));
        }
        for m in &self.modules {
            let w = backbone.store.get(backbone.projection_id(m.layer, m.slot));
            if w.shape() != [m.d_in, m.d_out] {
                return Err(BackboneError::AdapterMismatch(format!(
                    "layer {} {} is {:?}, adapter expects [{}, {}]",
                    m.layer,
                    m.target,
                    w.shape(),
                    m.d_in,
                    m.d_out
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds an adapter around stored A/B tensors, validating their shapes.
    pub fn from_tensors(
        backbone: &Backbone,
        config: LoraConfig,
        tensors: Vec<(Tensor, Tensor)>,
    ) -> Result<Self, BackboneError> {
        let mut adapter = attach_lora(backbone, config, 0)?;
        if tensors.len() != adapter.modules.len() {
            return Err(BackboneError::AdapterMismatch(format!(
                "{} A/B pairs for {} adapted projections",
                tensors.len(),
                adapter.modules.len()
            )));
        }
        for (m, (a, b)) in adapter.modules.clone().iter().zip(tensors) {
            if a.shape() != adapter.store.get(m.a).shape() || b.shape() != adapter.store.get(m.b).shape() {
                return Err(BackboneError::AdapterMismatch(format!("layer {} {} has wrong A/B shapes", m.layer, m.target)));
            }
            adapter.store.set(m.a, a);
            adapter.store.set(m.b, b);
        }
        Ok(adapter)
    }
}

pub fn attach_lora(backbone: &Backbone, config: LoraConfig, seed: u64) -> Result<LoraAdapter, BackboneError> {
    if config.r == 0 {
        return Err(BackboneError::Invalid("LoRA rank must be at least 1".into()));
    }
    let mut slots = Vec::new();
    for t in &config.targets {
        let slot = PROJECTIONS
            .iter()
            .position(|p| p == t)
            .ok_or_else(|| BackboneError::UnknownTarget { name: t.clone(), valid: PROJECTIONS })?;
        if !slots.contains(&slot) {
            slots.push(slot);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut modules = Vec::new();
    let mut lookup = vec![[None; 7]; backbone.layers.len()];
    for (layer, entry) in lookup.iter_mut().enumerate() {
        for &slot in &slots {
            let name = PROJECTIONS[slot];
            let (d_in, d_out) = projection_dims(&backbone.config, name);
            let a = store.add(format!("layers.{layer}.{name}.lora_a"), normal(&mut rng, &[d_in, config.r], config.init_std), true);
            let b = store.add(format!("layers.{layer}.{name}.lora_b"), Tensor::zeros(&[config.r, d_out]), true);
            entry[slot] = Some(modules.len());
            modules.push(LoraModule { layer, target: name.to_string(), slot, d_in, d_out, a, b });
        }
    }
    Ok(LoraAdapter { config, store, modules, d_model: backbone.d_model(), lookup })
}

/// Folds the adapter into a copy of the weights: `W <- W + (alpha / r) A B`.
///
/// The copy remembers the adapter's fingerprint so the same adapter cannot
/// be merged twice.
pub fn merge_lora(backbone: &Backbone, adapter: &LoraAdapter) -> Result<Backbone, BackboneError> {
    adapter.check_compatible(backbone)?;
    let fp = adapter.fingerprint();
    if backbone.merged.contains(&fp) {
        return Err(BackboneError::AlreadyMerged);
    }
    let mut out = backbone.clone();
    let s = adapter.scaling();
    for m in &adapter.modules {
        let a = adapter.store.get(m.a);
        let b = adapter.store.get(m.b);
        let mut delta = vec![0.0f32; m.d_in * m.d_out];
        crate::autodiff::gemm(m.d_in, adapter.config.r, m.d_out, a.data(), false, b.data(), false, 0.0, &mut delta);
        let id = out.projection_id(m.layer, m.slot);
        let w = out.store.get_mut(id);
        for (w, d) in w.data_mut().iter_mut().zip(&delta) {
            let d = s * d;
            if d != 0.0 {
                *w += d;
            }
        }
    }
    out.merged.push(fp);
    Ok(out)
}
