//! Dense tensors, a define-by-run autodiff graph, Adam and the LR schedule.

mod graph;
mod init;
mod kernels;
mod optim;
mod params;
mod schedule;
mod tensor;

pub use graph::{alibi_slope, dropout_mask, AttentionConfig, Graph, Primitive, Var};
pub use init::{normal, xavier_uniform};
pub(crate) use kernels::{dot, gemm};
pub use optim::{AdamConfig, AdamState};
pub use params::{Gradients, Param, ParamId, ParamKey, ParamStore};
pub use schedule::{LrSchedule, ScheduleKind};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: wrong number of inputs ({got})")]
    Arity { op: &'static str, got: usize },
    #[error("{op}: index {index} out of range (size {len})")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}
