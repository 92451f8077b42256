use std::f64::consts::PI;

use super::TrainConfig;
use crate::error::{LiftError, Result};

/// Learning rate for `step`: linear warmup reaching `peak_lr` on the last
/// warmup step, then half-cosine decay towards zero.
pub fn lr_at(config: &TrainConfig, step: u64) -> Result<f64> {
    if step >= config.total_steps {
        return Err(LiftError::Range(format!(
            "step {step} outside schedule of {} steps",
            config.total_steps
        )));
    }
    let warmup = config.warmup_steps;
    if step < warmup {
        return Ok(config.peak_lr * (step + 1) as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (config.total_steps - warmup) as f64;
    Ok(config.peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
}
