use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lora::LoraAdapter;
use super::tokenizer::Vocab;
use super::BackboneError;
use crate::autodiff::{normal, AttentionConfig, Graph, ParamId, ParamStore, Tensor, Var};
use crate::servekit::{Checkpoint, ServeError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context: usize,
    pub max_vocab: usize,
    pub rms_eps: f32,
    /// Linear distance penalty in attention, giving a recency prior.
    pub alibi: bool,
    pub init_std: f32,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            context: 256,
            max_vocab: 2048,
            rms_eps: 1e-5,
            alibi: true,
            init_std: 0.02,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub attn_norm: ParamId,
    pub mlp_norm: ParamId,
    /// Projections in [`super::PROJECTIONS`] order.
    pub proj: [ParamId; 7],
}

/// Decoder-only transformer with RMS norm, ALiBi attention and a SiLU-gated
/// MLP; the output head is tied to the word embeddings.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    embed: ParamId,
    pub(crate) layers: Vec<LayerIds>,
    final_norm: ParamId,
    frozen: bool,
    pub(crate) merged: Vec<u64>,
}

impl Backbone {
    pub fn new(vocab: Vocab, config: BackboneConfig) -> Result<Self, BackboneError> {
        let d = config.d_model;
        if d == 0 || config.n_heads == 0 || d % config.n_heads != 0 || config.n_layers == 0 || config.d_ff == 0 {
            return Err(BackboneError::Invalid(format!(
                "d_model {d} must be a positive multiple of n_heads {}; layers and d_ff must be positive",
                config.n_heads
            )));
        }
        if vocab.len() > config.max_vocab {
            return Err(BackboneError::Invalid(format!("vocabulary of {} exceeds {}", vocab.len(), config.max_vocab)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = config.init_std;
        let resid_std = std / (2.0 * config.n_layers as f32).sqrt();
        let mut store = ParamStore::new();
        let embed = store.add("embed_tokens", normal(&mut rng, &[vocab.len(), d], std), true);
        let mut layers = Vec::new();
        for l in 0..config.n_layers {
            let attn_norm = store.add(format!("layers.{l}.attn_norm"), Tensor::full(&[d], 1.0), true);
            let mlp_norm = store.add(format!("layers.{l}.mlp_norm"), Tensor::full(&[d], 1.0), true);
            let mut proj = [ParamId(0); 7];
            for (slot, name) in super::PROJECTIONS.iter().enumerate() {
                let (din, dout) = projection_dims(&config, name);
                let s = if *name == "o_proj" || *name == "down_proj" { resid_std } else { std };
                proj[slot] = store.add(format!("layers.{l}.{name}"), normal(&mut rng, &[din, dout], s), true);
            }
            layers.push(LayerIds { attn_norm, mlp_norm, proj });
        }
        let final_norm = store.add("final_norm", Tensor::full(&[d], 1.0), true);
        Ok(Self { config, vocab, store, embed, layers, final_norm, frozen: false, merged: Vec::new() })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every weight as non-trainable; no optimizer step can touch them afterwards.
    pub fn freeze(&mut self) {
        self.store.freeze_all();
        self.frozen = true;
    }

    pub fn bit_hash(&self) -> u64 {
        self.store.bit_hash()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    pub fn word_embeddings(&self) -> &Tensor {
        self.store.get(self.embed)
    }

    pub(crate) fn projection_id(&self, layer: usize, slot: usize) -> ParamId {
        self.layers[layer].proj[slot]
    }

    /// Looks up word embeddings for `ids` (`T x d_model`).
    pub fn embed_tokens(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, BackboneError> {
        let table = g.param(&self.store, self.embed);
        Ok(g.embedding(table, ids)?)
    }

    fn project(
        &self,
        g: &mut Graph,
        x: Var,
        layer: usize,
        slot: usize,
        adapter: Option<&LoraAdapter>,
    ) -> Result<Var, BackboneError> {
        let w = g.param(&self.store, self.layers[layer].proj[slot]);
        let y = g.matmul(x, w)?;
        match adapter.and_then(|a| a.module(layer, slot)) {
            Some((a, m)) => {
                let xd = g.dropout(x, a.config.dropout)?;
                let pa = g.param(&a.store, m.a);
                let pb = g.param(&a.store, m.b);
                let low = g.matmul(xd, pa)?;
                let delta = g.matmul(low, pb)?;
                let delta = g.scale(delta, a.scaling())?;
                Ok(g.add(y, delta)?)
            }
            None => Ok(y),
        }
    }

    /// Runs the decoder stack over an already-embedded `T x d_model` sequence.
    pub fn forward(&self, g: &mut Graph, x: Var, adapter: Option<&LoraAdapter>) -> Result<Var, BackboneError> {
        let t = g.shape(x)[0];
        self.forward_batch(g, x, t, None, adapter)
    }

    /// Runs a stack of equal-length sequences (`B*T x d_model`, each `T`
    /// rows). `key_mask` marks real rows; masked rows are never attended to,
    /// so left padding leaves every real position's output unchanged.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        x: Var,
        seq_len: usize,
        key_mask: Option<Vec<bool>>,
        adapter: Option<&LoraAdapter>,
    ) -> Result<Var, BackboneError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_model || seq_len == 0 || shape[0] % seq_len != 0 {
            return Err(BackboneError::Invalid(format!(
                "expected B*{seq_len} x {}, got {shape:?}",
                self.config.d_model
            )));
        }
        if seq_len > self.config.context {
            return Err(BackboneError::ContextOverflow { len: seq_len, context: self.config.context });
        }
        if let Some(a) = adapter {
            a.check_compatible(self)?;
        }
        let mut attn = AttentionConfig::causal(self.config.n_heads, seq_len).with_alibi(self.config.alibi);
        if let Some(mask) = key_mask {
            attn = attn.with_key_mask(mask);
        }
        let eps = self.config.rms_eps;
        let mut x = x;
        for (l, ids) in self.layers.iter().enumerate() {
            let gain = g.param(&self.store, ids.attn_norm);
            let h = g.rms_norm(x, gain, eps)?;
            let q = self.project(g, h, l, 0, adapter)?;
            let k = self.project(g, h, l, 1, adapter)?;
            let v = self.project(g, h, l, 2, adapter)?;
            let a = g.attention(q, k, v, attn.clone())?;
            let a = self.project(g, a, l, 3, adapter)?;
            x = g.add(x, a)?;
            let gain = g.param(&self.store, ids.mlp_norm);
            let h = g.rms_norm(x, gain, eps)?;
            let gate = self.project(g, h, l, 4, adapter)?;
            let gate = g.silu(gate)?;
            let up = self.project(g, h, l, 5, adapter)?;
            let m = g.mul(gate, up)?;
            let m = self.project(g, m, l, 6, adapter)?;
            x = g.add(x, m)?;
        }
        let gain = g.param(&self.store, self.final_norm);
        Ok(g.rms_norm(x, gain, eps)?)
    }

    /// Next-token logits through the tied output head.
    pub fn lm_logits(&self, g: &mut Graph, hidden: Var) -> Result<Var, BackboneError> {
        let table = g.param(&self.store, self.embed);
        Ok(g.matmul_nt(hidden, table)?)
    }

    /// Mean next-token cross-entropy of one token sequence.
    pub fn lm_loss(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, BackboneError> {
        if ids.len() < 2 {
            return Err(BackboneError::Invalid("need at least two tokens for a next-token loss".into()));
        }
        let x = self.embed_tokens(g, &ids[..ids.len() - 1])?;
        let h = self.forward(g, x, None)?;
        let logits = self.lm_logits(g, h)?;
        Ok(g.cross_entropy(logits, &ids[1..])?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab,
            "frozen": self.frozen,
            "merged": self.merged,
        });
        let mut ck = Checkpoint::new("backbone", meta);
        for (_, p) in self.store.iter() {
            ck.push(p.name.clone(), p.value().clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ServeError> {
        #[derive(Deserialize)]
        struct Meta {
            config: BackboneConfig,
            vocab: Vocab,
            frozen: bool,
            #[serde(default)]
            merged: Vec<u64>,
        }
        let meta: Meta = ck.meta_as()?;
        let mut b = Backbone::new(meta.vocab, meta.config).map_err(|e| ServeError::Format(e.to_string()))?;
        let ids: Vec<(ParamId, String)> = b.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = ck.get(&name)?;
            if t.shape() != b.store.get(id).shape() {
                return Err(ServeError::Format(format!("backbone tensor {name} has shape {:?}", t.shape())));
            }
            b.store.set(id, t.clone());
        }
        if meta.frozen {
            b.freeze();
        }
        b.merged = meta.merged;
        Ok(b)
    }
}

pub(crate) fn projection_dims(config: &BackboneConfig, name: &str) -> (usize, usize) {
    let (d, f) = (config.d_model, config.d_ff);
    match name {
        "gate_proj" | "up_proj" => (d, f),
        "down_proj" => (f, d),
        _ => (d, d),
    }
}
