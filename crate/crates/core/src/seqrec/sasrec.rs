use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embeddings::{EmbeddingSource, Provenance};
use super::SeqrecError;
use crate::autodiff::{xavier_uniform, AdamConfig, AdamState, AttentionConfig, Graph, ParamId, ParamStore, Tensor, Var};
use crate::datasets::{truncate, SplitDataset};
use crate::evalkit::{hr_at_k, rank_of_target, EvalError, Scorer};
use crate::servekit::{Checkpoint, ServeError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SasRecConfig {
    pub dim: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f32,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Stop after this many epochs without a validation HR@10 improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for SasRecConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            max_len: 50,
            layers: 2,
            heads: 2,
            dropout: 0.2,
            epochs: 10,
            lr: 1e-3,
            batch_size: 64,
            weight_decay: 0.0,
            patience: 3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Self-attentive next-item model with a tied item table.
///
/// The item table has `N + 1` rows; row `N` is the padding id used to
/// left-pad short sequences and is masked out of attention.
#[derive(Clone, Debug)]
pub struct SasRec {
    pub config: SasRecConfig,
    pub n_items: usize,
    pub store: ParamStore,
    items: ParamId,
    positions: ParamId,
    blocks: Vec<BlockIds>,
    final_g: ParamId,
    final_b: ParamId,
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub val_hr10: Vec<f64>,
    pub best_epoch: usize,
    /// Eval-mode training loss before the first update.
    pub initial_loss: f64,
    /// Eval-mode training loss of the returned model.
    pub final_loss: f64,
}

const LN_EPS: f32 = 1e-6;

impl SasRec {
    pub fn new(n_items: usize, config: SasRecConfig) -> Result<Self, SeqrecError> {
        if n_items == 0 || config.dim == 0 || config.heads == 0 || config.dim % config.heads != 0 {
            return Err(SeqrecError::Invalid(format!(
                "need n_items > 0 and dim divisible by heads (n_items {n_items}, dim {}, heads {})",
                config.dim, config.heads
            )));
        }
        if config.max_len == 0 || config.batch_size == 0 {
            return Err(SeqrecError::Invalid("max_len and batch_size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let mut store = ParamStore::new();
        let mut table = xavier_uniform(&mut rng, &[n_items + 1, d], n_items + 1, d);
        table.row_mut(n_items).fill(0.0);
        let items = store.add("item_emb", table, true);
        let positions = store.add("pos_emb", xavier_uniform(&mut rng, &[config.max_len, d], config.max_len, d), true);
        let mut blocks = Vec::new();
        for l in 0..config.layers {
            let mut sq = |name: &str, store: &mut ParamStore| {
                store.add(format!("block{l}.{name}"), xavier_uniform(&mut rng, &[d, d], d, d), true)
            };
            let wq = sq("wq", &mut store);
            let wk = sq("wk", &mut store);
            let wv = sq("wv", &mut store);
            let wo = sq("wo", &mut store);
            let w1 = sq("w1", &mut store);
            let w2 = sq("w2", &mut store);
            blocks.push(BlockIds {
                ln1_g: store.add(format!("block{l}.ln1_g"), Tensor::full(&[d], 1.0), true),
                ln1_b: store.add(format!("block{l}.ln1_b"), Tensor::zeros(&[d]), true),
                wq,
                wk,
                wv,
                wo,
                ln2_g: store.add(format!("block{l}.ln2_g"), Tensor::full(&[d], 1.0), true),
                ln2_b: store.add(format!("block{l}.ln2_b"), Tensor::zeros(&[d]), true),
                w1,
                b1: store.add(format!("block{l}.b1"), Tensor::zeros(&[d]), true),
                w2,
                b2: store.add(format!("block{l}.b2"), Tensor::zeros(&[d]), true),
            });
        }
        let final_g = store.add("final_g", Tensor::full(&[d], 1.0), true);
        let final_b = store.add("final_b", Tensor::zeros(&[d]), true);
        Ok(Self { config, n_items, store, items, positions, blocks, final_g, final_b })
    }

    pub fn pad_id(&self) -> usize {
        self.n_items
    }

    /// Full item table including the padding row.
    pub fn item_table(&self) -> &Tensor {
        self.store.get(self.items)
    }

    /// Left-pads each sequence to the longest one; positions are aligned so
    /// the most recent item always sits at `max_len - 1`.
    fn encode(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<(Var, usize), SeqrecError> {
        let t = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if t == 0 || t > self.config.max_len {
            return Err(SeqrecError::Invalid(format!("sequence length {t} outside 1..={}", self.config.max_len)));
        }
        let pad = self.pad_id();
        let mut ids = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            ids.extend(std::iter::repeat_n(pad, t - s.len()));
            for &i in *s {
                if i >= self.n_items {
                    return Err(SeqrecError::ItemOutOfRange { id: i, n_items: self.n_items });
                }
                ids.push(i);
            }
        }
        let mask: Vec<bool> = ids.iter().map(|&i| i != pad).collect();
        let pos_ids: Vec<usize> = (0..seqs.len()).flat_map(|_| (self.config.max_len - t)..self.config.max_len).collect();
        let p = self.config.dropout;
        let d = self.config.dim;

        let table = g.param(&self.store, self.items);
        let e = g.embedding(table, &ids)?;
        let e = g.scale(e, (d as f32).sqrt())?;
        let pos_table = g.param(&self.store, self.positions);
        let pe = g.embedding(pos_table, &pos_ids)?;
        let mut x = g.add(e, pe)?;
        x = g.dropout(x, p)?;
        for b in &self.blocks {
            let (g1, b1) = (g.param(&self.store, b.ln1_g), g.param(&self.store, b.ln1_b));
            let h = g.layer_norm(x, g1, b1, LN_EPS)?;
            let wq = g.param(&self.store, b.wq);
            let wk = g.param(&self.store, b.wk);
            let wv = g.param(&self.store, b.wv);
            let wo = g.param(&self.store, b.wo);
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let cfg = AttentionConfig::causal(self.config.heads, t).with_key_mask(mask.clone());
            let a = g.attention(q, k, v, cfg)?;
            let a = g.matmul(a, wo)?;
            let a = g.dropout(a, p)?;
            x = g.add(x, a)?;
            let (g2, b2) = (g.param(&self.store, b.ln2_g), g.param(&self.store, b.ln2_b));
            let h = g.layer_norm(x, g2, b2, LN_EPS)?;
            let (w1, bb1) = (g.param(&self.store, b.w1), g.param(&self.store, b.b1));
            let (w2, bb2) = (g.param(&self.store, b.w2), g.param(&self.store, b.b2));
            let f = g.linear(h, w1, Some(bb1))?;
            let f = g.gelu(f)?;
            let f = g.linear(f, w2, Some(bb2))?;
            let f = g.dropout(f, p)?;
            x = g.add(x, f)?;
        }
        let (fg, fb) = (g.param(&self.store, self.final_g), g.param(&self.store, self.final_b));
        Ok((g.layer_norm(x, fg, fb, LN_EPS)?, t))
    }

    /// Logits over the real items for the chosen rows of the encoded batch.
    fn logits_for_rows(&self, g: &mut Graph, hidden: Var, rows: &[usize]) -> Result<Var, SeqrecError> {
        let h = g.embedding(hidden, rows)?;
        let table = g.param(&self.store, self.items);
        let real = g.slice(table, 0, 0, self.n_items)?;
        Ok(g.matmul_nt(h, real)?)
    }

    /// Catalog scores for the position after each history (truncated to `max_len`).
    pub fn score_batch(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f32>>, SeqrecError> {
        let seqs: Vec<&[usize]> = histories.iter().map(|h| truncate(h, self.config.max_len)).collect();
        let mut g = Graph::new();
        let (hidden, t) = self.encode(&mut g, &seqs)?;
        let rows: Vec<usize> = (0..seqs.len()).map(|b| b * t + t - 1).collect();
        let logits = self.logits_for_rows(&mut g, hidden, &rows)?;
        let v = g.value(logits);
        Ok((0..seqs.len()).map(|b| v.row(b).to_vec()).collect())
    }

    /// Scores at every position of one sequence, row `i` predicting item `i + 1`.
    pub fn score_all_positions(&self, seq: &[usize]) -> Result<Vec<Vec<f32>>, SeqrecError> {
        let mut g = Graph::new();
        let (hidden, t) = self.encode(&mut g, &[seq])?;
        let rows: Vec<usize> = (0..t).collect();
        let logits = self.logits_for_rows(&mut g, hidden, &rows)?;
        let v = g.value(logits);
        Ok((0..t).map(|r| v.row(r).to_vec()).collect())
    }

    /// Mean next-item cross-entropy over every non-padding position.
    fn batch_loss(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Var, SeqrecError> {
        let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
        let (hidden, t) = self.encode(g, &inputs)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, s) in seqs.iter().enumerate() {
            let n = s.len() - 1;
            for j in 0..n {
                rows.push(b * t + (t - n) + j);
                targets.push(s[j + 1]);
            }
        }
        let logits = self.logits_for_rows(g, hidden, &rows)?;
        Ok(g.cross_entropy(logits, &targets)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.config, "n_items": self.n_items });
        let mut ck = Checkpoint::new("sasrec", meta);
        for (_, p) in self.store.iter() {
            ck.push(p.name.clone(), p.value().clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ServeError> {
        #[derive(Deserialize)]
        struct Meta {
            config: SasRecConfig,
            n_items: usize,
        }
        let meta: Meta = ck.meta_as()?;
        let mut model = SasRec::new(meta.n_items, meta.config).map_err(|e| ServeError::Format(e.to_string()))?;
        let ids: Vec<(ParamId, String)> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = ck.get(&name)?;
            if t.shape() != model.store.get(id).shape() {
                return Err(ServeError::Format(format!("sasrec tensor {name} has shape {:?}", t.shape())));
            }
            model.store.set(id, t.clone());
        }
        Ok(model)
    }
}

impl EmbeddingSource for SasRec {
    fn raw_item_table(&self) -> &Tensor {
        self.item_table()
    }

    fn n_items(&self) -> usize {
        self.n_items
    }

    fn provenance(&self) -> Provenance {
        Provenance::Sasrec
    }
}

impl Scorer for SasRec {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn score(&self, _user: usize, history: &[usize]) -> Result<Vec<f32>, EvalError> {
        let mut out = SasRec::score_batch(self, &[history]).map_err(|e| EvalError::Scorer(e.to_string()))?;
        Ok(out.pop().unwrap())
    }

    fn score_batch(&self, queries: &[(usize, &[usize])]) -> Result<Vec<Vec<f32>>, EvalError> {
        let hs: Vec<&[usize]> = queries.iter().map(|&(_, h)| h).collect();
        SasRec::score_batch(self, &hs).map_err(|e| EvalError::Scorer(e.to_string()))
    }
}

/// Validation HR@10: rank each user's validation item from the train history.
pub(crate) fn validation_hr10(model: &SasRec, split: &SplitDataset) -> Result<f64, SeqrecError> {
    let mut ranks = Vec::with_capacity(split.users.len());
    for chunk in split.users.chunks(256) {
        let histories: Vec<&[usize]> = chunk.iter().map(|u| u.train.as_slice()).collect();
        let scores = model.score_batch(&histories)?;
        for (u, s) in chunk.iter().zip(&scores) {
            ranks.push(rank_of_target(s, u.valid, None).map_err(|e| SeqrecError::Invalid(e.to_string()))?);
        }
    }
    hr_at_k(&ranks, 10).map_err(|e| SeqrecError::Invalid(e.to_string()))
}

fn mean_loss(model: &SasRec, seqs: &[&[usize]], batch_size: usize) -> Result<f64, SeqrecError> {
    let mut total = 0.0;
    let mut n = 0;
    for chunk in seqs.chunks(batch_size) {
        let mut g = Graph::new();
        let loss = model.batch_loss(&mut g, chunk)?;
        let positions: usize = chunk.iter().map(|s| s.len() - 1).sum();
        total += g.value(loss).item() as f64 * positions as f64;
        n += positions;
    }
    Ok(total / n as f64)
}

/// Next-item training on each user's train sequence, keeping the epoch with
/// the best validation HR@10.
pub fn train_sasrec(split: &SplitDataset, config: SasRecConfig) -> Result<(SasRec, TrainLog), SeqrecError> {
    let mut model = SasRec::new(split.n_items, config.clone())?;
    let seqs: Vec<&[usize]> = split
        .users
        .iter()
        .map(|u| truncate(&u.train, config.max_len + 1))
        .filter(|s| s.len() >= 2)
        .collect();
    if seqs.is_empty() {
        return Err(SeqrecError::Invalid("no training sequence has two or more items".into()));
    }
    let mut adam = AdamState::new(AdamConfig { weight_decay: config.weight_decay, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5a5a);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut log = TrainLog::default();
    let mut best = (f64::NEG_INFINITY, model.store.snapshot());
    let mut since_best = 0;
    let mut step = 0u64;
    log.initial_loss = mean_loss(&model, &seqs, config.batch_size)?;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i]).collect();
            let mut g = Graph::training(config.seed.wrapping_mul(1_000_003).wrapping_add(step));
            let loss = model.batch_loss(&mut g, &batch).map_err(|e| SeqrecError::Diverged {
                epoch,
                step: step as usize,
                detail: e.to_string(),
            })?;
            let value = g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            adam.step(&mut model.store, &grads, config.lr)?;
            total += value;
            batches += 1;
            step += 1;
        }
        let hr = validation_hr10(&model, split)?;
        log::info!("sasrec epoch {}: loss {:.4}, val HR@10 {:.4}", epoch + 1, total / batches as f64, hr);
        log.epoch_loss.push(total / batches as f64);
        log.val_hr10.push(hr);
        if hr > best.0 {
            best = (hr, model.store.snapshot());
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.store.restore(best.1);
    log.final_loss = mean_loss(&model, &seqs, config.batch_size)?;
    Ok((model, log))
}
