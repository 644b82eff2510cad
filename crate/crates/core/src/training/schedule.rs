use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Optimization protocol. `scale` shrinks warmup, validation cadence and
/// patience together for short runs; `max_steps` is not scaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Overrides the schedule's peak (e.g. 0.03); `base_lr` otherwise.
    pub peak_lr: Option<f64>,
    pub weight_decay: f64,
    pub batch: usize,
    /// Windows per span (outer sequence length).
    pub seq_len: usize,
    pub warmup_steps: u64,
    pub validate_every: u64,
    pub patience_steps: u64,
    pub scale: f64,
    pub max_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            peak_lr: None,
            weight_decay: 1e-4,
            batch: 16,
            seq_len: 21,
            warmup_steps: 20_000,
            validate_every: 400,
            patience_steps: 100_000,
            scale: 1.0,
            max_steps: 500_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A few hundred steps at a larger step size.
    pub fn desk() -> Self {
        Self {
            base_lr: 2e-3,
            batch: 8,
            warmup_steps: 40,
            validate_every: 100,
            patience_steps: 1_000,
            max_steps: 400,
            ..Self::default()
        }
    }

    fn scaled(&self, steps: u64) -> u64 {
        ((steps as f64 * self.scale).round() as u64).max(1)
    }

    pub fn effective_warmup(&self) -> u64 {
        if self.warmup_steps == 0 {
            0
        } else {
            self.scaled(self.warmup_steps)
        }
    }

    pub fn effective_validate_every(&self) -> u64 {
        self.scaled(self.validate_every)
    }

    pub fn effective_patience(&self) -> u64 {
        self.scaled(self.patience_steps)
    }

    pub fn peak(&self) -> f64 {
        self.peak_lr.unwrap_or(self.base_lr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || self.peak_lr.is_some_and(|p| !(p >= 0.0)) {
            return Err(config_err("training learning rates must be non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("training.weight_decay must be non-negative"));
        }
        if self.batch == 0 || self.seq_len == 0 || self.max_steps == 0 || self.validate_every == 0 {
            return Err(config_err("training batch, seq_len, max_steps and validate_every must be positive"));
        }
        if !(self.scale > 0.0) {
            return Err(config_err("training.scale must be positive"));
        }
        if self.effective_validate_every() > self.effective_patience() {
            return Err(config_err("validate_every must not exceed patience_steps"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at `max_steps`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak();
    let warmup = cfg.effective_warmup();
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= cfg.max_steps {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (cfg.max_steps - warmup) as f64;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// True once `patience` steps have passed without a new best.
pub fn early_stop(step: u64, best_step: u64, patience: u64) -> bool {
    step.saturating_sub(best_step) >= patience
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            warmup_steps: 100,
            max_steps: 1100,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg();
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(100, &c), 1e-4);
        assert!((lr_schedule(600, &c) - 0.5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(1100, &c), 0.0);
        let high = TrainConfig { peak_lr: Some(0.03), ..c };
        assert_eq!(lr_schedule(100, &high), 0.03);
    }

    #[test]
    fn scale_shrinks_the_protocol() {
        let c = TrainConfig { scale: 0.01, ..Default::default() };
        assert_eq!((c.effective_warmup(), c.effective_validate_every(), c.effective_patience()), (200, 4, 1000));
    }

    #[test]
    fn early_stopping_boundaries() {
        assert!(!early_stop(199, 100, 100));
        assert!(early_stop(200, 100, 100));
        assert!(early_stop(100, 0, 100));
        assert!(!early_stop(5000, 5000, 100));
    }

    proptest! {
        #[test]
        fn schedule_is_bounded_and_continuous(step in 0u64..1200) {
            let c = cfg();
            let lr = lr_schedule(step, &c);
            prop_assert!((0.0..=1e-4).contains(&lr));
            let next = lr_schedule(step + 1, &c);
            prop_assert!((next - lr).abs() <= 1e-4 / 100.0 + 1e-18);
        }
    }
}
