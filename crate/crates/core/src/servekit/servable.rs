use std::path::Path;
use std::sync::Arc;

use super::bundle::import_bundle;
use super::ServeError;
use crate::autodiff::Graph;
use crate::backbone::Backbone;
use crate::datasets::truncate;
use crate::e4srec::E4SRec;

/// A loaded bundle ready for softmax-free top-k inference.
///
/// Item vectors are the columns of `W_out`, stored row-major so each item's
/// inner product with the final hidden state reads contiguous memory.
#[derive(Debug)]
pub struct Servable {
    model: E4SRec,
    item_vectors: Vec<f32>,
    version: u64,
}

impl Servable {
    pub fn new(model: E4SRec, version: u64) -> Self {
        let (dk, n) = (model.d_k(), model.n_items());
        let w = model.w_out().data();
        let mut item_vectors = vec![0.0f32; n * dk];
        for k in 0..dk {
            for i in 0..n {
                item_vectors[i * dk + k] = w[k * n + i];
            }
        }
        Self { model, item_vectors, version }
    }

    pub fn load(path: impl AsRef<Path>, backbone: Arc<Backbone>, version: u64) -> Result<Self, ServeError> {
        Ok(Self::new(import_bundle(path, backbone)?, version))
    }

    pub fn model(&self) -> &E4SRec {
        &self.model
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_items(&self) -> usize {
        self.model.n_items()
    }

    /// Top `min(k, N)` items by raw inner product `h · w_i`, best first;
    /// equal scores put the lower id first. Histories longer than the
    /// model's window keep their most recent items.
    pub fn infer_topk(&self, item_ids: &[usize], k: usize) -> Result<(Vec<usize>, Vec<f32>), ServeError> {
        if item_ids.is_empty() {
            return Err(ServeError::Invalid("item_ids must not be empty".into()));
        }
        if k == 0 {
            return Err(ServeError::Invalid("k must be at least 1".into()));
        }
        let n = self.n_items();
        let mut bad: Vec<usize> = item_ids.iter().copied().filter(|&i| i >= n).collect();
        if !bad.is_empty() {
            bad.sort_unstable();
            bad.dedup();
            return Err(ServeError::UnknownItems { ids: bad, n_items: n });
        }
        let history = truncate(item_ids, self.model.max_len);
        let mut g = Graph::new();
        let h = self.model.final_hidden(&mut g, history).map_err(|e| ServeError::Invalid(e.to_string()))?;
        let h = g.value(h).data();
        let dk = h.len();
        let scores: Vec<f32> = self
            .item_vectors
            .chunks_exact(dk)
            .map(|w| w.iter().zip(h).map(|(a, b)| a * b).sum())
            .collect();
        let items = top_k(&scores, k);
        let top = items.iter().map(|&i| scores[i]).collect();
        Ok((items, top))
    }
}

/// Indices of the `k` best scores, descending, lower index first on ties.
pub fn top_k(scores: &[f32], k: usize) -> Vec<usize> {
    let better = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k, better);
        idx.truncate(k);
    }
    idx.sort_unstable_by(better);
    idx
}
