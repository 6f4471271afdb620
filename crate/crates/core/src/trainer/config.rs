use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchCostConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Linear warmup over `warmup_epochs`, then cosine decay to 0.
    CosineWarmup { warmup_epochs: f64 },
    /// `base * factor^k` after the k-th milestone epoch.
    Step { milestones: Vec<usize>, factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Probability that a pre-training sample carries a condition.
    pub p_cond: f64,
    /// Lets ordinal and scale conditions be active together.
    pub allow_joint: bool,
    pub seed: u64,
    pub train_fraction: f64,
    /// Synthesized samples per pre-training epoch.
    pub samples_per_epoch: usize,
    /// Validation loss every this many fine-tuning epochs; 0 disables.
    pub validate_every: usize,
    pub match_cost: MatchCostConfig,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            batch_size: 32,
            epochs: 15,
            base_lr: 5e-4,
            schedule: Schedule::CosineWarmup { warmup_epochs: 1.0 },
            weight_decay: 1e-4,
            grad_clip: 0.1,
            p_cond: 0.5,
            allow_joint: false,
            seed: 0,
            train_fraction: 1.0,
            samples_per_epoch: 2000,
            validate_every: 0,
            match_cost: MatchCostConfig::default(),
        }
    }

    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            batch_size: 16,
            epochs: 20,
            schedule: Schedule::CosineWarmup { warmup_epochs: 5.0 },
            validate_every: 1,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!("base_lr {} is invalid", self.base_lr)));
        }
        if !(0.0..=1.0).contains(&self.p_cond) {
            return Err(Error::Config(format!("p_cond {} outside [0, 1]", self.p_cond)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1]", self.train_fraction)));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("weight_decay and grad_clip must be nonnegative".into()));
        }
        if self.phase == Phase::Pretrain && self.samples_per_epoch == 0 {
            return Err(Error::Config("samples_per_epoch must be positive".into()));
        }
        match &self.schedule {
            Schedule::CosineWarmup { warmup_epochs } => {
                if !(*warmup_epochs >= 0.0) {
                    return Err(Error::Config("warmup_epochs must be nonnegative".into()));
                }
            }
            Schedule::Step { milestones, factor } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config("milestones must be strictly increasing".into()));
                }
                if !(*factor > 0.0 && *factor < 1.0) {
                    return Err(Error::Config(format!("step factor {factor} outside (0, 1)")));
                }
            }
        }
        self.match_cost.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

/// Learning rate at optimizer step `step` (0-based).
pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let base = cfg.base_lr;
    let spe = steps_per_epoch.max(1);
    match &cfg.schedule {
        Schedule::CosineWarmup { warmup_epochs } => {
            let warmup = (warmup_epochs * spe as f64).round() as usize;
            let total = cfg.epochs * spe;
            if step < warmup {
                return base * (step + 1) as f64 / warmup as f64;
            }
            if total <= warmup {
                return base;
            }
            let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
        Schedule::Step { milestones, factor } => {
            let epoch = step / spe;
            let passed = milestones.iter().filter(|&&m| m <= epoch).count();
            base * factor.powi(passed as i32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_and_cosine_endpoints() {
        let cfg = TrainConfig {
            base_lr: 0.01,
            epochs: 10,
            schedule: Schedule::CosineWarmup { warmup_epochs: 2.0 },
            ..TrainConfig::finetune()
        };
        let spe = 5;
        assert_eq!(lr_at(9, &cfg, spe), 0.01);
        assert!((lr_at(0, &cfg, spe) - 0.001).abs() < 1e-15);
        assert!(lr_at(50, &cfg, spe).abs() < 1e-18);
        assert!(lr_at(30, &cfg, spe) < lr_at(20, &cfg, spe));
    }

    #[test]
    fn step_schedule_counts_milestones() {
        let cfg = TrainConfig {
            base_lr: 1.0,
            epochs: 120,
            schedule: Schedule::Step { milestones: vec![80, 100], factor: 0.1 },
            ..TrainConfig::finetune()
        };
        assert_eq!(lr_at(79 * 3, &cfg, 3), 1.0);
        assert!((lr_at(90 * 3, &cfg, 3) - 0.1).abs() < 1e-15);
        assert!((lr_at(100 * 3, &cfg, 3) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::pretrain().validate().is_ok());
        let bad = TrainConfig {
            schedule: Schedule::Step { milestones: vec![5, 5], factor: 0.1 },
            ..TrainConfig::finetune()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { train_fraction: 0.0, ..TrainConfig::finetune() };
        assert!(bad.validate().is_err());
    }
}
