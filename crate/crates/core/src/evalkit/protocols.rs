use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::rank_of_target;
use super::report::{MetricsReport, Protocol};
use super::{EvalError, Scorer};
use crate::datasets::{SplitDataset, UserSplit};

/// Which held-out item is ranked, and from which history.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    /// Validation item, scored from the train history.
    Valid,
    /// Test item, scored from train + validation.
    Test,
}

impl EvalTarget {
    pub fn history_and_target(self, u: &UserSplit) -> (Vec<usize>, usize) {
        match self {
            EvalTarget::Valid => (u.train.clone(), u.valid),
            EvalTarget::Test => (u.train_and_valid(), u.test),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user: usize,
    pub rank: usize,
    pub n_candidates: usize,
}

const SCORE_CHUNK: usize = 16;

/// Scores every user's history, handing the scorer chunks of users at a
/// time. Chunks group histories of similar length so batched scorers pad
/// little; rows come back in user order.
fn all_scores(scorer: &dyn Scorer, split: &SplitDataset, target: EvalTarget) -> Result<Vec<Vec<f32>>, EvalError> {
    let queries: Vec<(usize, Vec<usize>)> =
        split.users.iter().map(|u| (u.user, target.history_and_target(u).0)).collect();
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.sort_by_key(|&i| queries[i].1.len());
    let mut out: Vec<Vec<f32>> = vec![Vec::new(); queries.len()];
    for chunk in order.chunks(SCORE_CHUNK) {
        let refs: Vec<(usize, &[usize])> = chunk.iter().map(|&i| (queries[i].0, queries[i].1.as_slice())).collect();
        let scores = scorer.score_batch(&refs)?;
        if scores.len() != refs.len() {
            return Err(EvalError::Scorer(format!("{} score rows for {} users", scores.len(), refs.len())));
        }
        for (&i, s) in chunk.iter().zip(scores) {
            if s.len() != scorer.n_items() {
                return Err(EvalError::ScoreLength { got: s.len(), want: scorer.n_items() });
            }
            out[i] = s;
        }
    }
    Ok(out)
}

/// Ranks each user's held-out item against the whole catalog. With
/// `mask_history`, items already in the history (other than the target)
/// are removed from the candidate set.
pub fn rank_full(
    scorer: &dyn Scorer,
    split: &SplitDataset,
    target: EvalTarget,
    mask_history: bool,
) -> Result<Vec<RankingResult>, EvalError> {
    let n = scorer.n_items();
    let all = all_scores(scorer, split, target)?;
    let mut out = Vec::with_capacity(split.users.len());
    for (u, scores) in split.users.iter().zip(all) {
        let (history, t) = target.history_and_target(u);
        let (rank, n_candidates) = if mask_history {
            let mut seen = vec![false; n];
            for &i in &history {
                if i < n {
                    seen[i] = true;
                }
            }
            seen[t] = false;
            let cands: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
            (rank_of_target(&scores, t, Some(&cands))?, cands.len())
        } else {
            (rank_of_target(&scores, t, None)?, n)
        };
        out.push(RankingResult { user: u.user, rank, n_candidates });
    }
    Ok(out)
}

pub fn evaluate_full(
    scorer: &dyn Scorer,
    split: &SplitDataset,
    target: EvalTarget,
    mask_history: bool,
) -> Result<MetricsReport, EvalError> {
    let ranks = rank_full(scorer, split, target, mask_history)?;
    MetricsReport::from_rankings(Protocol::Full, &ranks)
}

/// Ranks each user's test item against `n_neg` negatives drawn uniformly
/// without replacement. The draw for a user depends only on `seed` and the
/// user id. With `exclude_history`, every item the user interacted with is
/// ineligible; otherwise only the target is.
pub fn rank_sampled(
    scorer: &dyn Scorer,
    split: &SplitDataset,
    n_neg: usize,
    seed: u64,
    exclude_history: bool,
) -> Result<Vec<RankingResult>, EvalError> {
    let n = scorer.n_items();
    let all = all_scores(scorer, split, EvalTarget::Test)?;
    let mut out = Vec::with_capacity(split.users.len());
    for (u, scores) in split.users.iter().zip(all) {
        let (history, t) = EvalTarget::Test.history_and_target(u);
        let mut banned = vec![false; n];
        banned[t] = true;
        if exclude_history {
            for &i in &history {
                if i < n {
                    banned[i] = true;
                }
            }
        }
        let eligible: Vec<usize> = (0..n).filter(|&i| !banned[i]).collect();
        if eligible.len() < n_neg {
            return Err(EvalError::NotEnoughNegatives { user: u.user, eligible: eligible.len(), needed: n_neg });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u.user as u64);
        let mut cands: Vec<usize> =
            rand::seq::index::sample(&mut rng, eligible.len(), n_neg).into_iter().map(|j| eligible[j]).collect();
        cands.push(t);
        let rank = rank_of_target(&scores, t, Some(&cands))?;
        out.push(RankingResult { user: u.user, rank, n_candidates: cands.len() });
    }
    Ok(out)
}

pub fn evaluate_sampled(
    scorer: &dyn Scorer,
    split: &SplitDataset,
    n_neg: usize,
    seed: u64,
    exclude_history: bool,
) -> Result<MetricsReport, EvalError> {
    let ranks = rank_sampled(scorer, split, n_neg, seed, exclude_history)?;
    MetricsReport::from_rankings(Protocol::Sampled { n_neg }, &ranks)
}
