//! Ranking metrics, the full-catalog and sampled-negative protocols, and
//! sparsity-group reporting.

mod groups;
mod metrics;
mod protocols;
mod report;

pub use groups::{group_by_sparsity, SparsityBounds, UserGroup};
pub use metrics::{hr_at_k, mrr, ndcg_at_k, rank_of_target};
pub use protocols::{evaluate_full, evaluate_sampled, rank_full, rank_sampled, EvalTarget, RankingResult};
pub use report::{GroupReport, Metric, MetricsReport, Protocol};

/// Anything that scores the whole catalog for a user given a history.
pub trait Scorer {
    fn n_items(&self) -> usize;

    /// One score per item, higher is better; length must equal [`Scorer::n_items`].
    fn score(&self, user: usize, history: &[usize]) -> Result<Vec<f32>, EvalError>;

    /// Scores several `(user, history)` queries; override when batching is cheaper.
    fn score_batch(&self, queries: &[(usize, &[usize])]) -> Result<Vec<Vec<f32>>, EvalError> {
        queries.iter().map(|&(u, h)| self.score(u, h)).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no ranks to aggregate")]
    EmptyRanks,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("target item {0} is not among the candidates")]
    TargetNotCandidate(usize),
    #[error("scorer returned {got} scores for a catalog of {want}")]
    ScoreLength { got: usize, want: usize },
    #[error("user {user}: only {eligible} eligible negatives, {needed} requested")]
    NotEnoughNegatives { user: usize, eligible: usize, needed: usize },
    #[error("scoring failed: {0}")]
    Scorer(String),
}
