use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{Error, Result};

/// Optimizer schedule: warmup to `peak_lr`, then inverse-square-root decay.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_updates: usize,
    pub accumulation: usize,
    pub clip_norm: f64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_updates: usize) -> Result<Self> {
        let s = Self {
            peak_lr,
            warmup_steps,
            total_updates,
            accumulation: 1,
            clip_norm: 1.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let s = Self {
            peak_lr: cfg.peak_lr,
            warmup_steps: cfg.warmup_steps,
            total_updates: cfg.total_updates,
            accumulation: cfg.accumulation,
            clip_norm: cfg.clip_norm,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || self.warmup_steps == 0 || self.accumulation == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "schedule needs peak_lr > 0, warmup_steps >= 1, accumulation >= 1 and clip_norm > 0".into(),
            ));
        }
        Ok(())
    }

    /// `peak_lr * min(step / warmup, sqrt(warmup / step))`.
    pub fn lr_at_step(&self, step: usize) -> Result<f64> {
        if step == 0 {
            return Err(Error::Usage("learning-rate steps start at 1".into()));
        }
        let (s, w) = (step as f64, self.warmup_steps as f64);
        Ok(self.peak_lr * (s / w).min((w / s).sqrt()))
    }
}
