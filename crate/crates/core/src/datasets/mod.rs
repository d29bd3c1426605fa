//! Interaction-log ingestion, k-core filtering, per-user sequences,
//! leave-one-out splitting and the seeded synthetic corpus.

mod ingest;
mod kcore;
mod sequences;
mod synth;

pub use ingest::{load_interactions, parse_interactions, write_interactions, InteractionRecord, LoadReport};
pub use kcore::k_core_filter;
pub use sequences::{build_sequences, leave_one_out, truncate, SequenceDataset, SplitDataset, UserSplit};
pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("reading interactions: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset is empty: {0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}
