use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompt::PromptTemplate;
use super::E4sError;
use crate::autodiff::{xavier_uniform, Graph, ParamId, ParamStore, Tensor, Var};
use crate::backbone::{attach_lora, Backbone, LoraAdapter, LoraConfig};
use crate::datasets::truncate;
use crate::evalkit::{EvalError, Scorer};
use crate::seqrec::{ItemEmbeddingTable, Provenance};
use crate::servekit::Checkpoint;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Injected prompt through the backbone.
    Llm,
    /// Mean of projected item embeddings straight into the item projection.
    NoLlm,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    lora: LoraConfig,
    mode: Mode,
    max_len: usize,
    provenance: Provenance,
    backbone_hash: u64,
}

/// Everything besides the backbone, for building a model from stored tensors.
#[derive(Clone, Debug)]
pub struct E4SRecParts {
    pub embeddings: ItemEmbeddingTable,
    pub w_in: Tensor,
    pub w_out: Tensor,
    pub lora: LoraConfig,
    pub lora_tensors: Vec<(Tensor, Tensor)>,
    pub mode: Mode,
    pub max_len: usize,
}

/// Recommender over a shared frozen backbone.
///
/// Trainable state is the adapter store and the projection store
/// (`W_in`, `W_out`); the item embeddings and the backbone are read-only.
#[derive(Clone, Debug)]
pub struct E4SRec {
    pub backbone: Arc<Backbone>,
    pub template: PromptTemplate,
    pub adapter: LoraAdapter,
    pub projections: ParamStore,
    pub embeddings: ParamStore,
    pub provenance: Provenance,
    pub mode: Mode,
    pub max_len: usize,
    w_in: ParamId,
    w_out: ParamId,
    table: ParamId,
    n_items: usize,
}

impl E4SRec {
    /// Fresh model: Xavier projections and a zero-delta adapter.
    pub fn new(
        backbone: Arc<Backbone>,
        embeddings: ItemEmbeddingTable,
        lora: LoraConfig,
        mode: Mode,
        max_len: usize,
        seed: u64,
    ) -> Result<Self, E4sError> {
        let (n, ds) = (embeddings.n_items(), embeddings.dim());
        let dk = backbone.d_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_in = xavier_uniform(&mut rng, &[ds, dk], ds, dk);
        let w_out = xavier_uniform(&mut rng, &[dk, n], dk, n);
        let adapter = attach_lora(&backbone, lora, seed ^ 0x10a)?;
        Self::assemble(backbone, embeddings, adapter, w_in, w_out, mode, max_len)
    }

    pub fn from_parts(backbone: Arc<Backbone>, parts: E4SRecParts) -> Result<Self, E4sError> {
        let adapter = LoraAdapter::from_tensors(&backbone, parts.lora, parts.lora_tensors)?;
        Self::assemble(backbone, parts.embeddings, adapter, parts.w_in, parts.w_out, parts.mode, parts.max_len)
    }

    fn assemble(
        backbone: Arc<Backbone>,
        embeddings: ItemEmbeddingTable,
        adapter: LoraAdapter,
        w_in: Tensor,
        w_out: Tensor,
        mode: Mode,
        max_len: usize,
    ) -> Result<Self, E4sError> {
        let (n, ds) = (embeddings.n_items(), embeddings.dim());
        let dk = backbone.d_model();
        if w_in.shape() != [ds, dk] || w_out.shape() != [dk, n] {
            return Err(E4sError::Invalid(format!(
                "projection shapes {:?} / {:?} do not fit d_s={ds}, d_k={dk}, N={n}",
                w_in.shape(),
                w_out.shape()
            )));
        }
        if max_len == 0 {
            return Err(E4sError::Invalid("max_len must be positive".into()));
        }
        let template = PromptTemplate::recommendation(&backbone.vocab);
        if template.length(max_len) > backbone.config.context {
            return Err(E4sError::Invalid(format!(
                "prompt of {} positions exceeds the backbone context {}",
                template.length(max_len),
                backbone.config.context
            )));
        }
        let mut projections = ParamStore::new();
        let w_in = projections.add("w_in", w_in, true);
        let w_out = projections.add("w_out", w_out, true);
        let mut store = ParamStore::new();
        let provenance = embeddings.provenance;
        let table = store.add("item_embeddings", embeddings.table, false);
        Ok(Self {
            backbone,
            template,
            adapter,
            projections,
            embeddings: store,
            provenance,
            mode,
            max_len,
            w_in,
            w_out,
            table,
            n_items: n,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn d_s(&self) -> usize {
        self.item_table().shape()[1]
    }

    pub fn d_k(&self) -> usize {
        self.backbone.d_model()
    }

    pub fn item_table(&self) -> &Tensor {
        self.embeddings.get(self.table)
    }

    pub fn w_in(&self) -> &Tensor {
        self.projections.get(self.w_in)
    }

    pub fn w_out(&self) -> &Tensor {
        self.projections.get(self.w_out)
    }

    pub fn w_in_id(&self) -> ParamId {
        self.w_in
    }

    pub fn w_out_id(&self) -> ParamId {
        self.w_out
    }

    /// `|E| + |W_in| + |Θ| + |W_out|`.
    pub fn num_pluggable_parameters(&self) -> usize {
        self.item_table().numel() + self.w_in().numel() + self.adapter.num_parameters() + self.w_out().numel()
    }

    pub fn lora_tensors(&self) -> Vec<(Tensor, Tensor)> {
        self.adapter
            .modules
            .iter()
            .map(|m| (self.adapter.store.get(m.a).clone(), self.adapter.store.get(m.b).clone()))
            .collect()
    }

    pub fn to_parts(&self) -> E4SRecParts {
        E4SRecParts {
            embeddings: ItemEmbeddingTable { table: self.item_table().clone(), provenance: self.provenance },
            w_in: self.w_in().clone(),
            w_out: self.w_out().clone(),
            lora: self.adapter.config.clone(),
            lora_tensors: self.lora_tensors(),
            mode: self.mode,
            max_len: self.max_len,
        }
    }

    fn check_history(&self, item_ids: &[usize]) -> Result<(), E4sError> {
        if item_ids.is_empty() {
            return Err(E4sError::EmptyHistory);
        }
        if item_ids.len() > self.max_len {
            return Err(E4sError::HistoryTooLong { len: item_ids.len(), max: self.max_len });
        }
        if let Some(&id) = item_ids.iter().find(|&&i| i >= self.n_items) {
            return Err(E4sError::ItemOutOfRange { id, n_items: self.n_items });
        }
        Ok(())
    }

    /// Projected item embeddings, `|item_ids| x d_k`.
    fn injected(&self, g: &mut Graph, item_ids: &[usize]) -> Result<Var, E4sError> {
        let table = g.param(&self.embeddings, self.table);
        let e = g.embedding(table, item_ids)?;
        let w_in = g.param(&self.projections, self.w_in);
        Ok(g.matmul(e, w_in)?)
    }

    /// Prompt word embeddings with each item's projected embedding in its
    /// own position: `T = |prefix| + |items| + |suffix|` rows of width `d_k`.
    pub fn assemble_input(&self, g: &mut Graph, item_ids: &[usize]) -> Result<Var, E4sError> {
        self.check_history(item_ids)?;
        let prefix = self.backbone.embed_tokens(g, &self.template.prefix_ids)?;
        let items = self.injected(g, item_ids)?;
        let suffix = self.backbone.embed_tokens(g, &self.template.suffix_ids)?;
        Ok(g.concat(&[prefix, items, suffix], 0)?)
    }

    /// Final hidden state that the item projection reads (`1 x d_k`).
    pub fn final_hidden(&self, g: &mut Graph, item_ids: &[usize]) -> Result<Var, E4sError> {
        self.batch_hidden(g, &[item_ids])
    }

    /// One final hidden row per history (`B x d_k`). Prompts are left-padded
    /// to a common length and run through the backbone as one stack.
    pub fn batch_hidden(&self, g: &mut Graph, histories: &[&[usize]]) -> Result<Var, E4sError> {
        if histories.is_empty() {
            return Err(E4sError::Invalid("empty batch".into()));
        }
        match self.mode {
            Mode::Llm => {
                let t = histories.iter().map(|h| self.template.length(h.len())).max().unwrap_or(0);
                let dk = self.d_k();
                let mut parts = Vec::with_capacity(histories.len() * 2);
                let mut mask = Vec::with_capacity(histories.len() * t);
                for h in histories {
                    let x = self.assemble_input(g, h)?;
                    let pad = t - g.shape(x)[0];
                    if pad > 0 {
                        parts.push(g.constant(Tensor::zeros(&[pad, dk])));
                    }
                    parts.push(x);
                    mask.extend((0..t).map(|i| i >= pad));
                }
                let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
                let mask = if mask.iter().all(|&m| m) { None } else { Some(mask) };
                let h = self.backbone.forward_batch(g, x, t, mask, Some(&self.adapter))?;
                let last: Vec<usize> = (0..histories.len()).map(|b| b * t + t - 1).collect();
                Ok(g.embedding(h, &last)?)
            }
            Mode::NoLlm => {
                let mut rows = Vec::with_capacity(histories.len());
                for h in histories {
                    self.check_history(h)?;
                    let items = self.injected(g, h)?;
                    rows.push(g.mean_rows(items)?);
                }
                Ok(if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? })
            }
        }
    }

    /// `1 x N` logits: one score for every catalog item and nothing else.
    pub fn logits(&self, g: &mut Graph, item_ids: &[usize]) -> Result<Var, E4sError> {
        self.batch_logits(g, &[item_ids])
    }

    /// `B x N` logits, one row per history.
    pub fn batch_logits(&self, g: &mut Graph, histories: &[&[usize]]) -> Result<Var, E4sError> {
        let h = self.batch_hidden(g, histories)?;
        let w_out = g.param(&self.projections, self.w_out);
        Ok(g.matmul(h, w_out)?)
    }

    /// Raw item scores for a history of at most `max_len` items.
    pub fn predict_scores(&self, item_ids: &[usize]) -> Result<Vec<f32>, E4sError> {
        let mut g = Graph::new();
        let l = self.logits(&mut g, item_ids)?;
        Ok(g.value(l).data().to_vec())
    }

    /// Softmax probabilities over the catalog.
    pub fn predict_probs(&self, item_ids: &[usize]) -> Result<Vec<f32>, E4sError> {
        let mut g = Graph::new();
        let l = self.logits(&mut g, item_ids)?;
        let p = g.softmax(l, 1)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Cross-entropy of the next item, fused with the logits.
    pub fn loss(&self, g: &mut Graph, item_ids: &[usize], target: usize) -> Result<Var, E4sError> {
        self.batch_loss(g, &[item_ids], &[target])
    }

    /// Mean cross-entropy over a batch of (history, next item) pairs.
    pub fn batch_loss(&self, g: &mut Graph, histories: &[&[usize]], targets: &[usize]) -> Result<Var, E4sError> {
        if histories.len() != targets.len() {
            return Err(E4sError::Invalid(format!("{} histories for {} targets", histories.len(), targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= self.n_items) {
            return Err(E4sError::ItemOutOfRange { id: t, n_items: self.n_items });
        }
        let l = self.batch_logits(g, histories)?;
        Ok(g.cross_entropy(l, targets)?)
    }

    /// Raw scores for several histories at once, one `N`-vector each.
    pub fn predict_batch(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f32>>, E4sError> {
        let mut g = Graph::new();
        let l = self.batch_logits(&mut g, histories)?;
        let n = self.n_items;
        Ok(g.value(l).data().chunks(n).map(|r| r.to_vec()).collect())
    }

    /// Pluggable parts plus the fingerprint of the backbone they were trained on.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            lora: self.adapter.config.clone(),
            mode: self.mode,
            max_len: self.max_len,
            provenance: self.provenance,
            backbone_hash: self.backbone.bit_hash(),
        };
        let mut ck = Checkpoint::new("e4srec", serde_json::to_value(meta).expect("metadata serializes"));
        ck.push("E", self.item_table().clone());
        ck.push("W_in", self.w_in().clone());
        ck.push("W_out", self.w_out().clone());
        for (m, (a, b)) in self.adapter.modules.iter().zip(self.lora_tensors()) {
            ck.push(format!("layers.{}.{}.lora_a", m.layer, m.target), a);
            ck.push(format!("layers.{}.{}.lora_b", m.layer, m.target), b);
        }
        ck
    }

    /// Rebuilds a model saved by [`E4SRec::to_checkpoint`]; the backbone must
    /// be bit-identical to the one used in training.
    pub fn from_checkpoint(mut ck: Checkpoint, backbone: Arc<Backbone>) -> Result<Self, E4sError> {
        let meta: CheckpointMeta = ck.meta_as()?;
        if meta.backbone_hash != backbone.bit_hash() {
            return Err(E4sError::Invalid(format!(
                "checkpoint was trained on backbone {:016x}, loaded backbone is {:016x}",
                meta.backbone_hash,
                backbone.bit_hash()
            )));
        }
        let table = ck.take("E")?;
        let w_in = ck.take("W_in")?;
        let w_out = ck.take("W_out")?;
        let mut lora_tensors = Vec::new();
        for layer in 0..backbone.config.n_layers {
            for target in &meta.lora.targets {
                let a = ck.take(&format!("layers.{layer}.{target}.lora_a"))?;
                let b = ck.take(&format!("layers.{layer}.{target}.lora_b"))?;
                lora_tensors.push((a, b));
            }
        }
        let parts = E4SRecParts {
            embeddings: ItemEmbeddingTable { table, provenance: meta.provenance },
            w_in,
            w_out,
            lora: meta.lora,
            lora_tensors,
            mode: meta.mode,
            max_len: meta.max_len,
        };
        Self::from_parts(backbone, parts)
    }

    /// Combined fingerprint of the trainable stores.
    pub fn trainable_hash(&self) -> u64 {
        self.adapter.store.bit_hash() ^ self.projections.bit_hash().rotate_left(17)
    }
}

impl Scorer for E4SRec {
    fn n_items(&self) -> usize {
        self.n_items
    }

    /// Scores from the most recent `max_len` history items.
    fn score(&self, _user: usize, history: &[usize]) -> Result<Vec<f32>, EvalError> {
        self.predict_scores(truncate(history, self.max_len)).map_err(|e| EvalError::Scorer(e.to_string()))
    }

    fn score_batch(&self, queries: &[(usize, &[usize])]) -> Result<Vec<Vec<f32>>, EvalError> {
        let hs: Vec<&[usize]> = queries.iter().map(|&(_, h)| truncate(h, self.max_len)).collect();
        self.predict_batch(&hs).map_err(|e| EvalError::Scorer(e.to_string()))
    }
}
