use serde::{Deserialize, Serialize};

/// Linear warmup from zero followed by cosine annealing to a floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrScheduleConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub anneal_steps: u64,
}

impl Default for LrScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            min_lr: 1e-7,
            warmup_steps: 7_000,
            anneal_steps: 96_160,
        }
    }
}

impl LrScheduleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return Err(format!(
                "need 0 < min_lr <= base_lr, got min_lr={} base_lr={}",
                self.min_lr, self.base_lr
            ));
        }
        if self.anneal_steps == 0 {
            return Err("anneal_steps must be positive".into());
        }
        Ok(())
    }
}

pub fn lr_at_step(cfg: &LrScheduleConfig, step: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let t = step - cfg.warmup_steps;
    if t == 0 {
        return cfg.base_lr;
    }
    if t >= cfg.anneal_steps {
        return cfg.min_lr;
    }
    let progress = t as f64 / cfg.anneal_steps as f64;
    cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}
