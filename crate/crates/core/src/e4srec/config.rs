use serde::{Deserialize, Serialize};

use crate::backbone::LoraConfig;

/// Recommender training settings; keys follow the usual adapter-tuning names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lora_r: usize,
    pub lora_alpha: f32,
    pub lora_dropout: f32,
    pub lora_target_modules: Vec<String>,
    pub lr_scheduler: String,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Optional cap on optimizer updates.
    pub max_steps: Option<u64>,
    pub max_len: usize,
    /// Train on every prefix of each train sequence, not only the full one.
    pub all_prefixes: bool,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("synthetic").unwrap()
    }
}

/// Named presets; `synthetic` is tuned for the bundled generator.
pub const PRESETS: &[&str] = &["beauty", "sports", "toys", "yelp", "synthetic"];

impl TrainConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let (epochs, learning_rate, warmup_steps) = match name {
            "beauty" => (3, 3e-4, 100),
            "sports" => (3, 2e-4, 200),
            "toys" => (2, 2e-4, 100),
            "yelp" => (5, 3e-4, 300),
            "synthetic" => (10, 2e-3, 40),
            _ => return None,
        };
        Some(Self {
            epochs,
            learning_rate,
            batch_size: 16,
            lora_r: 16,
            lora_alpha: 16.0,
            lora_dropout: 0.05,
            lora_target_modules: vec!["gate_proj".into(), "down_proj".into(), "up_proj".into()],
            lr_scheduler: "cosine".into(),
            weight_decay: 0.1,
            warmup_steps,
            max_steps: None,
            max_len: 50,
            all_prefixes: false,
            clip_norm: 1.0,
            seed: 42,
        })
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            r: self.lora_r,
            alpha: self.lora_alpha,
            dropout: self.lora_dropout,
            targets: self.lora_target_modules.clone(),
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_share_adapter_settings() {
        for name in PRESETS {
            let c = TrainConfig::preset(name).unwrap();
            assert_eq!((c.batch_size, c.lora_r, c.lora_alpha, c.lora_dropout), (16, 16, 16.0, 0.05));
            assert_eq!(c.weight_decay, 0.1);
            assert_eq!(c.lr_scheduler, "cosine");
            assert_eq!(c.lora_target_modules, ["gate_proj", "down_proj", "up_proj"]);
        }
        let b = TrainConfig::preset("beauty").unwrap();
        assert_eq!((b.epochs, b.learning_rate, b.warmup_steps), (3, 3e-4, 100));
        assert!(TrainConfig::preset("movies").is_none());
    }

    #[test]
    fn toml_and_json_round_trip() {
        let c = TrainConfig::preset("yelp").unwrap();
        let t = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&t).unwrap(), c);
        let j = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&j).unwrap(), c);
        let partial: TrainConfig = toml::from_str("epochs = 7").unwrap();
        assert_eq!(partial.epochs, 7);
        assert_eq!(partial.batch_size, 16);
    }
}
