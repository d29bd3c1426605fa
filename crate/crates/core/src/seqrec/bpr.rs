use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embeddings::{EmbeddingSource, Provenance};
use super::SeqrecError;
use crate::autodiff::{normal, AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::datasets::SplitDataset;
use crate::evalkit::{EvalError, Scorer};
use crate::servekit::{Checkpoint, ServeError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BprConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub weight_decay: f64,
    pub init_std: f32,
    pub seed: u64,
}

impl Default for BprConfig {
    fn default() -> Self {
        Self { dim: 64, epochs: 20, lr: 5e-3, batch_size: 256, negatives: 1, weight_decay: 0.0, init_std: 0.1, seed: 11 }
    }
}

/// Matrix factorization trained with the pairwise BPR objective.
#[derive(Clone, Debug)]
pub struct BprModel {
    pub config: BprConfig,
    pub n_users: usize,
    pub n_items: usize,
    pub store: ParamStore,
    users: ParamId,
    items: ParamId,
}

impl BprModel {
    pub fn new(n_users: usize, n_items: usize, config: BprConfig) -> Result<Self, SeqrecError> {
        if n_users == 0 || n_items < 2 || config.dim == 0 {
            return Err(SeqrecError::Invalid("BPR needs users, at least two items and dim > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let users = store.add("user_factors", normal(&mut rng, &[n_users, config.dim], config.init_std), true);
        let items = store.add("item_factors", normal(&mut rng, &[n_items, config.dim], config.init_std), true);
        Ok(Self { config, n_users, n_items, store, users, items })
    }

    pub fn user_factors(&self) -> &Tensor {
        self.store.get(self.users)
    }

    pub fn item_factors(&self) -> &Tensor {
        self.store.get(self.items)
    }

    pub fn score_pair(&self, user: usize, item: usize) -> f32 {
        crate::autodiff::dot(self.user_factors().row(user), self.item_factors().row(item))
    }

    pub fn score_user(&self, user: usize) -> Vec<f32> {
        let p = self.user_factors().row(user);
        (0..self.n_items).map(|i| crate::autodiff::dot(p, self.item_factors().row(i))).collect()
    }

    /// Mean of `-log sigmoid(s(u, i+) - s(u, i-))` over the triples, computed
    /// as two-way cross-entropy with the positive in column 0.
    pub fn pairwise_loss(&self, g: &mut Graph, triples: &[(usize, usize, usize)]) -> Result<Var, SeqrecError> {
        let us: Vec<usize> = triples.iter().map(|t| t.0).collect();
        let pos: Vec<usize> = triples.iter().map(|t| t.1).collect();
        let neg: Vec<usize> = triples.iter().map(|t| t.2).collect();
        let pu = g.param(&self.store, self.users);
        let qi = g.param(&self.store, self.items);
        let pu = g.embedding(pu, &us)?;
        let qp = g.embedding(qi, &pos)?;
        let qn = g.embedding(qi, &neg)?;
        let sp = g.mul(pu, qp)?;
        let sp = g.sum_axis(sp, 1)?;
        let sn = g.mul(pu, qn)?;
        let sn = g.sum_axis(sn, 1)?;
        let logits = g.concat(&[sp, sn], 1)?;
        Ok(g.cross_entropy(logits, &vec![0; triples.len()])?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.config, "n_users": self.n_users, "n_items": self.n_items });
        let mut ck = Checkpoint::new("bpr", meta);
        ck.push("user_factors", self.user_factors().clone());
        ck.push("item_factors", self.item_factors().clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ServeError> {
        #[derive(Deserialize)]
        struct Meta {
            config: BprConfig,
            n_users: usize,
            n_items: usize,
        }
        let meta: Meta = ck.meta_as()?;
        let mut m = BprModel::new(meta.n_users, meta.n_items, meta.config).map_err(|e| ServeError::Format(e.to_string()))?;
        for id in [m.users, m.items] {
            let name = m.store.param(id).name.clone();
            let t = ck.get(&name)?;
            if t.shape() != m.store.get(id).shape() {
                return Err(ServeError::Format(format!("bpr tensor {name} has shape {:?}", t.shape())));
            }
            m.store.set(id, t.clone());
        }
        Ok(m)
    }
}

impl EmbeddingSource for BprModel {
    fn raw_item_table(&self) -> &Tensor {
        self.item_factors()
    }

    fn n_items(&self) -> usize {
        self.n_items
    }

    fn provenance(&self) -> Provenance {
        Provenance::Bpr
    }
}

impl Scorer for BprModel {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn score(&self, user: usize, _history: &[usize]) -> Result<Vec<f32>, EvalError> {
        if user >= self.n_users {
            return Err(EvalError::Scorer(format!("user {user} unknown to the BPR model")));
        }
        Ok(self.score_user(user))
    }
}

/// Trains on every (user, train item) pair with uniformly drawn negatives
/// the user has not interacted with in training.
pub fn train_bpr(split: &SplitDataset, config: BprConfig) -> Result<BprModel, SeqrecError> {
    let n_users = split.users.iter().map(|u| u.user + 1).max().unwrap_or(0);
    let mut model = BprModel::new(n_users, split.n_items, config.clone())?;
    let mut pairs = Vec::new();
    let mut seen: Vec<HashSet<usize>> = vec![HashSet::new(); n_users];
    for u in &split.users {
        for &i in &u.train {
            pairs.push((u.user, i));
            seen[u.user].insert(i);
        }
    }
    if pairs.is_empty() {
        return Err(SeqrecError::Invalid("no training interactions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xb9b);
    let mut adam = AdamState::new(AdamConfig { weight_decay: config.weight_decay, ..Default::default() });
    let mut step = 0;
    for epoch in 0..config.epochs {
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in pairs.chunks(config.batch_size) {
            let mut triples = Vec::with_capacity(chunk.len() * config.negatives.max(1));
            for &(u, i) in chunk {
                for _ in 0..config.negatives.max(1) {
                    if seen[u].len() >= split.n_items {
                        continue;
                    }
                    let j = loop {
                        let j = rng.random_range(0..split.n_items);
                        if !seen[u].contains(&j) {
                            break j;
                        }
                    };
                    triples.push((u, i, j));
                }
            }
            if triples.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let loss = model
                .pairwise_loss(&mut g, &triples)
                .map_err(|e| SeqrecError::Diverged { epoch, step, detail: e.to_string() })?;
            total += g.value(loss).item() as f64;
            batches += 1;
            let grads = g.backward(loss)?;
            adam.step(&mut model.store, &grads, config.lr)?;
            step += 1;
        }
        log::info!("bpr epoch {}: loss {:.4}", epoch + 1, total / batches.max(1) as f64);
    }
    Ok(model)
}
