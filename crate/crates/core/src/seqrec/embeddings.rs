use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::servekit::{Checkpoint, ServeError};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Sasrec,
    Bpr,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Sasrec => "sasrec",
            Provenance::Bpr => "bpr",
        })
    }
}

/// `N x d_s` item embeddings; row `i` belongs to item `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemEmbeddingTable {
    pub table: Tensor,
    pub provenance: Provenance,
}

impl ItemEmbeddingTable {
    pub fn n_items(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("item-embeddings", serde_json::json!({ "provenance": self.provenance }));
        ck.push("E", self.table.clone());
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self, ServeError> {
        #[derive(Deserialize)]
        struct Meta {
            provenance: Provenance,
        }
        let meta: Meta = ck.meta_as()?;
        let table = ck.take("E")?;
        if table.shape().len() != 2 {
            return Err(ServeError::Format(format!("embedding table must be 2-D, got {:?}", table.shape())));
        }
        Ok(Self { table, provenance: meta.provenance })
    }
}

/// A trained model whose item embedding table can be lifted out.
pub trait EmbeddingSource {
    /// The stored table; may carry extra rows (e.g. padding) after the items.
    fn raw_item_table(&self) -> &Tensor;
    fn n_items(&self) -> usize;
    fn provenance(&self) -> Provenance;
}

/// Copies rows `0..N` of the model's item table verbatim.
pub fn extract_item_embeddings(model: &dyn EmbeddingSource) -> ItemEmbeddingTable {
    let raw = model.raw_item_table();
    let (_, d) = raw.dims2();
    let n = model.n_items();
    let data = raw.data()[..n * d].to_vec();
    let table = Tensor::new(vec![n, d], data).expect("row count fits the stored table");
    ItemEmbeddingTable { table, provenance: model.provenance() }
}
