use super::EvalError;

/// 1-based rank of `target` by descending score among `candidates`
/// (every item when `None`). Equal scores rank the lower item index first.
pub fn rank_of_target(scores: &[f32], target: usize, candidates: Option<&[usize]>) -> Result<usize, EvalError> {
    if target >= scores.len() {
        return Err(EvalError::TargetNotCandidate(target));
    }
    let st = scores[target];
    let beats = |c: usize| {
        let sc = scores[c];
        sc > st || (sc == st && c < target)
    };
    match candidates {
        None => Ok(1 + (0..scores.len()).filter(|&c| c != target && beats(c)).count()),
        Some(cands) => {
            if !cands.contains(&target) {
                return Err(EvalError::TargetNotCandidate(target));
            }
            Ok(1 + cands.iter().filter(|&&c| c != target && c < scores.len() && beats(c)).count())
        }
    }
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    check(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// With one relevant item the ideal DCG is 1, so nDCG is the discount itself.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    check(ranks, k)?;
    let total = ranks.iter().filter(|&&r| r <= k).fold(0.0, |acc, &r| acc + 1.0 / ((r + 1) as f64).log2());
    Ok(total / ranks.len() as f64)
}

pub fn mrr(ranks: &[usize]) -> Result<f64, EvalError> {
    check(ranks, 1)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

fn check(ranks: &[usize], k: usize) -> Result<(), EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyRanks);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(())
}
