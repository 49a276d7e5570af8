use std::f64::consts::PI;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cues::CueDropout;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoint (and evaluation hook) period in steps; 0 disables.
    pub eval_every: u64,
    pub init_checkpoint: Option<PathBuf>,
    /// Training crops are cut or zero-padded to this length.
    pub segment_s: f64,
    pub grad_clip: f64,
    pub cue_dropout: CueDropout,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            warmup_steps: 50,
            peak_lr: 1.5e-4,
            batch_size: 2,
            weight_decay: 1e-2,
            seed: 0,
            eval_every: 0,
            init_checkpoint: None,
            segment_s: 3.0,
            grad_clip: 5.0,
            cue_dropout: CueDropout::default(),
        }
    }
}

impl TrainConfig {
    /// 300k steps, 5k warmup, peak 1.5e-4, batch 16.
    pub fn paper() -> Self {
        TrainConfig {
            total_steps: 300_000,
            warmup_steps: 5_000,
            peak_lr: 1.5e-4,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if !(self.segment_s > 0.0) {
            return bad("segment_s must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        self.cue_dropout.validate()
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at the last step.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return Ok(cfg.peak_lr);
        }
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(0.5 * cfg.peak_lr * (1.0 + (PI * progress).cos()))
}
