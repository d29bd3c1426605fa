//! Sequential recommendation by injecting pretrained item-ID embeddings
//! into a frozen decoder-only language model.
//!
//! The crate covers the whole pipeline: the tensor/autodiff engine,
//! dataset preparation, the ID-embedding pretraining models, the toy
//! language-model backbone with low-rank adapters, the recommender itself,
//! evaluation protocols, and pluggable deployment bundles.

pub mod autodiff;
pub mod datasets;
pub mod evalkit;
pub mod seqrec;
pub mod servekit;
pub mod backbone;
pub mod e4srec;
