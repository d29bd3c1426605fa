use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, InteractionRecord};

/// Seeded first-order Markov corpus.
///
/// Each item's successor distribution mixes `successors` random permutations
/// with weights `exp(-sharpness * m)`, `m = 0, 1, ...`. A mixture of
/// permutations keeps item popularity roughly uniform, and an infinite
/// sharpness leaves exactly one successor per item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub transition_sharpness: f64,
    pub successors: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 200,
            transition_sharpness: 1.0,
            successors: 32,
            min_len: 8,
            max_len: 40,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn item_name(idx: usize) -> String {
        format!("i{idx:05}")
    }

    pub fn user_name(idx: usize) -> String {
        format!("u{idx:06}")
    }

    /// Successor weights per permutation rank, normalized.
    pub fn mixture_weights(&self) -> Vec<f64> {
        let m = self.successors.max(1);
        let raw: Vec<f64> = (0..m)
            .map(|r| if r == 0 { 1.0 } else { (-self.transition_sharpness * r as f64).exp() })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    /// The permutations that define the chain, rank 0 first.
    pub fn permutations(&self) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.successors.max(1))
            .map(|_| {
                let mut p: Vec<usize> = (0..self.n_items).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect()
    }

    /// Exact transition probability `P(next = j | current = i)`.
    pub fn transition_prob(&self, perms: &[Vec<usize>], i: usize, j: usize) -> f64 {
        self.mixture_weights().iter().zip(perms).filter(|(_, p)| p[i] == j).map(|(w, _)| w).sum()
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<InteractionRecord>, DataError> {
    if cfg.n_users == 0 || cfg.n_items == 0 {
        return Err(DataError::Invalid("synthetic corpus needs at least one user and one item".into()));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(DataError::Invalid(format!("bad walk length range {}..={}", cfg.min_len, cfg.max_len)));
    }
    if cfg.transition_sharpness.is_nan() || cfg.transition_sharpness < 0.0 {
        return Err(DataError::Invalid("transition_sharpness must be >= 0".into()));
    }
    let perms = cfg.permutations();
    let weights = cfg.mixture_weights();
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut out = Vec::new();
    for u in 0..cfg.n_users {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut item = rng.random_range(0..cfg.n_items);
        let mut ts: u64 = 1_500_000_000 + rng.random_range(0..10_000_000u64);
        let user = SynthConfig::user_name(u);
        for step in 0..len {
            if step > 0 {
                let x: f64 = rng.random::<f64>() * acc;
                let rank = cumulative.iter().position(|&c| x < c).unwrap_or(cumulative.len() - 1);
                item = perms[rank][item];
                ts += rng.random_range(60..86_400u64);
            }
            out.push(InteractionRecord::new(user.clone(), SynthConfig::item_name(item), ts));
        }
    }
    Ok(out)
}
