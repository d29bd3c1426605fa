//! The toy decoder-only language model: tokenizer, instruction corpus,
//! frozen weights, low-rank adapters and next-token pretraining.

mod corpus;
mod lora;
mod model;
mod pretrain;
mod tokenizer;

pub use corpus::{render_alpaca, CorpusConfig, Example, InstructionCorpus, NEXT_ITEM_INSTRUCTION};
pub use lora::{attach_lora, merge_lora, LoraAdapter, LoraConfig, LoraModule, PROJECTIONS};
pub use model::{Backbone, BackboneConfig};
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainLog};
pub use tokenizer::{tokenize_words, Vocab, BOS, EOS, PAD, UNK};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("sequence of {len} positions exceeds the context window of {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("unknown projection {name:?}; expected one of {valid:?}")]
    UnknownTarget { name: String, valid: &'static [&'static str] },
    #[error("adapter does not fit the backbone: {0}")]
    AdapterMismatch(String),
    #[error("this adapter has already been merged into these weights")]
    AlreadyMerged,
    #[error("pretraining diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}
