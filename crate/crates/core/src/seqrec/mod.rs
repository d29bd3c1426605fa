//! Sequential recommenders that supply item ID embeddings (SASRec, BPR)
//! and the popularity baseline.

mod bpr;
mod embeddings;
mod pop;
mod sasrec;

pub use bpr::{train_bpr, BprConfig, BprModel};
pub use embeddings::{extract_item_embeddings, EmbeddingSource, ItemEmbeddingTable, Provenance};
pub use pop::{rank_by_counts, rank_pop, Popularity};
pub use sasrec::{train_sasrec, SasRec, SasRecConfig, TrainLog};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum SeqrecError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("item id {id} out of range for a catalog of {n_items}")]
    ItemOutOfRange { id: usize, n_items: usize },
}
