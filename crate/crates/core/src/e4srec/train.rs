use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::E4SRec;
use super::E4sError;
use crate::autodiff::{AdamConfig, AdamState, Graph, LrSchedule};
use crate::datasets::{truncate, SplitDataset};
use crate::evalkit::{hr_at_k, rank_full, EvalTarget};

/// One supervised example: history and the item that followed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

/// One instance per user (train prefix -> last train item), or every
/// prefix when `all_prefixes` is set. Histories keep the last `max_len` items.
pub fn build_instances(split: &SplitDataset, all_prefixes: bool, max_len: usize) -> Vec<Instance> {
    let mut out = Vec::new();
    for u in &split.users {
        let n = u.train.len();
        if n < 2 {
            continue;
        }
        let ends: Vec<usize> = if all_prefixes { (1..n).collect() } else { vec![n - 1] };
        for end in ends {
            out.push(Instance { user: u.user, history: truncate(&u.train[..end], max_len).to_vec(), target: u.train[end] });
        }
    }
    out
}

/// Adam states for the two trainable stores plus the shared LR schedule.
#[derive(Clone, Debug)]
pub struct E4sOptimizer {
    adapter: AdamState,
    projections: AdamState,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    step: u64,
}

impl E4sOptimizer {
    pub fn new(config: &TrainConfig, total_steps: u64) -> Result<Self, E4sError> {
        if config.lr_scheduler != "cosine" {
            return Err(E4sError::Invalid(format!("unsupported lr_scheduler {:?}", config.lr_scheduler)));
        }
        let adam = AdamConfig { weight_decay: config.weight_decay, ..Default::default() };
        Ok(Self {
            adapter: AdamState::new(adam.clone()),
            projections: AdamState::new(adam),
            schedule: LrSchedule::cosine(config.learning_rate, config.warmup_steps.min(total_steps), total_steps),
            clip_norm: config.clip_norm,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One update of the adapter and the projections from the mean loss of a
/// batch, evaluated as a single padded stack. Returns that loss.
pub fn training_step(model: &mut E4SRec, batch: &[Instance], opt: &mut E4sOptimizer, seed: u64) -> Result<f64, E4sError> {
    if batch.is_empty() {
        return Err(E4sError::Invalid("empty batch".into()));
    }
    let histories: Vec<&[usize]> = batch.iter().map(|b| b.history.as_slice()).collect();
    let targets: Vec<usize> = batch.iter().map(|b| b.target).collect();
    let mut g = Graph::training(seed.wrapping_mul(0x9e37_79b9).wrapping_add(opt.step));
    let loss = model.batch_loss(&mut g, &histories, &targets)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(E4sError::Diverged {
            epoch: 0,
            step: opt.step as usize,
            users: batch.iter().map(|b| b.user).collect(),
            detail: format!("loss {value}"),
        });
    }
    let mut grads = g.backward(loss)?;
    if opt.clip_norm > 0.0 {
        grads.clip_global_norm(opt.clip_norm);
    }
    let lr = opt.schedule.lr_at(opt.step + 1);
    opt.adapter.step(&mut model.adapter.store, &grads, lr)?;
    opt.projections.step(&mut model.projections, &grads, lr)?;
    opt.step += 1;
    Ok(value)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub val_hr10: Vec<f64>,
    pub steps: u64,
}

/// Batches per pool of this many batches are formed from length-sorted instances.
const LENGTH_POOL: usize = 32;

/// Shuffles `instances`, sorts each pool of `LENGTH_POOL` batches by history
/// length and returns the batch ranges in shuffled order, so batches hold
/// similar lengths and waste little on padding.
fn length_grouped_batches(instances: &mut [Instance], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<std::ops::Range<usize>> {
    instances.shuffle(rng);
    for pool in instances.chunks_mut(batch_size * LENGTH_POOL) {
        pool.sort_by_key(|i| i.history.len());
    }
    let mut ranges: Vec<_> = (0..instances.len()).step_by(batch_size).map(|s| s..(s + batch_size).min(instances.len())).collect();
    ranges.shuffle(rng);
    ranges
}

/// Runs the configured epochs, reporting validation HR@10 after each.
pub fn train(model: &mut E4SRec, split: &SplitDataset, config: &TrainConfig) -> Result<TrainLog, E4sError> {
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(E4sError::Invalid("batch_size and epochs must be positive".into()));
    }
    let mut instances = build_instances(split, config.all_prefixes, config.max_len.min(model.max_len));
    if instances.is_empty() {
        return Err(E4sError::Invalid("no user has a train sequence of two or more items".into()));
    }
    let per_epoch = instances.len().div_ceil(config.batch_size) as u64;
    let mut total = per_epoch * config.epochs as u64;
    if let Some(cap) = config.max_steps {
        total = total.min(cap);
    }
    let mut opt = E4sOptimizer::new(config, total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        if opt.steps_taken() >= total {
            break;
        }
        let batches_this_epoch = length_grouped_batches(&mut instances, config.batch_size, &mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for range in batches_this_epoch {
            let batch = &instances[range];
            if opt.steps_taken() >= total {
                break;
            }
            let loss = training_step(model, batch, &mut opt, config.seed).map_err(|e| match e {
                E4sError::Diverged { step, users, detail, .. } => E4sError::Diverged { epoch, step, users, detail },
                other => other,
            })?;
            sum += loss;
            batches += 1;
            if opt.steps_taken() % 25 == 0 {
                log::info!("e4srec epoch {} step {}/{total}: loss {loss:.4}", epoch + 1, opt.steps_taken());
            }
        }
        let ranks: Vec<usize> = rank_full(&*model, split, EvalTarget::Valid, false)
            .map_err(|e| E4sError::Invalid(e.to_string()))?
            .into_iter()
            .map(|r| r.rank)
            .collect();
        let hr = hr_at_k(&ranks, 10).map_err(|e| E4sError::Invalid(e.to_string()))?;
        log::info!("e4srec epoch {}: loss {:.4}, val HR@10 {hr:.4}", epoch + 1, sum / batches.max(1) as f64);
        log.epoch_loss.push(sum / batches.max(1) as f64);
        log.val_hr10.push(hr);
    }
    log.steps = opt.steps_taken();
    Ok(log)
}
