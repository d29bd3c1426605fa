//! The recommender: prompt assembly with injected item embeddings, the
//! input/output projections over a frozen backbone with LoRA, and training.

mod config;
mod model;
mod prompt;
mod train;

pub use config::{TrainConfig, PRESETS};
pub use model::{E4SRec, E4SRecParts, Mode};
pub use prompt::PromptTemplate;
pub use train::{build_instances, train, training_step, E4sOptimizer, Instance, TrainLog};

use crate::autodiff::AutodiffError;
use crate::backbone::BackboneError;

#[derive(Debug, thiserror::Error)]
pub enum E4sError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("item id {id} out of range for a catalog of {n_items}")]
    ItemOutOfRange { id: usize, n_items: usize },
    #[error("empty item history")]
    EmptyHistory,
    #[error("history of {len} items exceeds the maximum of {max}")]
    HistoryTooLong { len: usize, max: usize },
    #[error("non-finite loss at epoch {epoch}, step {step} (batch users {users:?}): {detail}")]
    Diverged { epoch: usize, step: usize, users: Vec<usize>, detail: String },
    #[error(transparent)]
    Checkpoint(#[from] crate::servekit::ServeError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}
