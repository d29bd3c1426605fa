use crate::datasets::SplitDataset;
use crate::evalkit::{EvalError, Scorer};

/// Scores every item by its training-interaction count.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity {
    pub counts: Vec<u64>,
}

impl Popularity {
    pub fn from_split(split: &SplitDataset) -> Self {
        let mut counts = vec![0u64; split.n_items];
        for u in &split.users {
            for &i in &u.train {
                counts[i] += 1;
            }
        }
        Self { counts }
    }

    pub fn ranking(&self) -> Vec<usize> {
        rank_by_counts(&self.counts)
    }
}

impl Scorer for Popularity {
    fn n_items(&self) -> usize {
        self.counts.len()
    }

    fn score(&self, _user: usize, _history: &[usize]) -> Result<Vec<f32>, EvalError> {
        Ok(self.counts.iter().map(|&c| c as f32).collect())
    }
}

/// Item indices by descending count; ties go to the lower index.
pub fn rank_by_counts(counts: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}

/// Popularity ranking over the training part of each user's sequence.
pub fn rank_pop(split: &SplitDataset) -> Vec<usize> {
    Popularity::from_split(split).ranking()
}
