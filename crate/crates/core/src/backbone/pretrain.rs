use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Backbone, BackboneConfig};
use super::tokenizer::Vocab;
use super::BackboneError;
use crate::autodiff::{AdamConfig, AdamState, Gradients, Graph, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Trailing share of the corpus kept out of training for perplexity.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 3e-3,
            warmup_steps: 30,
            batch_size: 16,
            weight_decay: 0.01,
            clip_norm: 1.0,
            heldout_fraction: 0.05,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub steps: usize,
    pub train_loss: Vec<f64>,
    pub initial_heldout_ppl: f64,
    pub final_heldout_ppl: f64,
}

fn heldout_perplexity(model: &Backbone, seqs: &[Vec<usize>]) -> Result<f64, BackboneError> {
    let mut total = 0.0;
    let mut tokens = 0;
    for s in seqs {
        let mut g = Graph::new();
        let loss = model.lm_loss(&mut g, s)?;
        total += g.value(loss).item() as f64 * (s.len() - 1) as f64;
        tokens += s.len() - 1;
    }
    Ok((total / tokens.max(1) as f64).exp())
}

/// Next-token training on every text for `epochs` passes, then freezes the
/// weights.
pub fn pretrain_backbone(
    texts: &[String],
    vocab: Vocab,
    model_config: BackboneConfig,
    config: &PretrainConfig,
) -> Result<(Backbone, PretrainLog), BackboneError> {
    let mut model = Backbone::new(vocab, model_config)?;
    let context = model.config.context;
    let seqs: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| {
            let mut ids = model.vocab.encode(t);
            ids.push(model.vocab.eos_id());
            ids.truncate(context + 1);
            ids
        })
        .filter(|ids| ids.len() >= 2)
        .collect();
    let n_held = ((seqs.len() as f64 * config.heldout_fraction).round() as usize).min(seqs.len().saturating_sub(1));
    let (train, held) = seqs.split_at(seqs.len() - n_held);
    if train.is_empty() || config.batch_size == 0 {
        return Err(BackboneError::Invalid("empty pretraining corpus or zero batch size".into()));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as u64;
    let schedule = LrSchedule::cosine(config.lr, config.warmup_steps.min(total_steps), total_steps);
    let mut adam = AdamState::new(AdamConfig { weight_decay: config.weight_decay, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = PretrainLog { initial_heldout_ppl: heldout_perplexity(&model, held)?, ..Default::default() };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut grads = Gradients::new();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let mut g = Graph::training(config.seed ^ step as u64);
                let loss = model
                    .lm_loss(&mut g, &train[i])
                    .map_err(|e| BackboneError::Diverged { step, detail: e.to_string() })?;
                batch_loss += g.value(loss).item() as f64;
                grads.merge(g.backward(loss)?);
            }
            grads.scale(1.0 / chunk.len() as f32);
            grads.clip_global_norm(config.clip_norm);
            adam.step(&mut model.store, &grads, schedule.lr_at(step as u64 + 1))?;
            let mean = batch_loss / chunk.len() as f64;
            if step % 50 == 0 {
                log::info!("backbone step {step}/{total_steps}: loss {mean:.4}");
            }
            log.train_loss.push(mean);
            step += 1;
        }
    }
    log.steps = step;
    log.final_heldout_ppl = heldout_perplexity(&model, held)?;
    model.freeze();
    Ok((model, log))
}
