use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn cosine(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self { base_lr, warmup_steps, total_steps, kind: ScheduleKind::Cosine }
    }

    /// Learning rate at `step`. Steps past `total_steps` are clamped.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = if step > self.total_steps {
            log::warn!("lr_at: step {} past total {}; clamping", step, self.total_steps);
            self.total_steps
        } else {
            step
        };
        let warmup = self.warmup_steps.min(self.total_steps);
        if step < warmup {
            return self.base_lr * step as f64 / warmup as f64;
        }
        let span = self.total_steps - warmup;
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - warmup) as f64 / span as f64;
        match self.kind {
            ScheduleKind::Cosine => 0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos()),
        }
    }
}
