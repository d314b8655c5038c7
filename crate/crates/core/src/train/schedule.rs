use crate::error::{Error, Result};

/// One-cycle learning-rate schedule: linear warmup from `lr_min` to `lr_max`,
/// then cosine decay back to `lr_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Fraction of `total_steps` spent warming up.
    pub warmup: f64,
    pub total_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr_min: 1e-5,
            lr_max: 1e-3,
            warmup: 0.15,
            total_steps: 2000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup
            )));
        }
        Ok(())
    }

    /// Warmup length rounded to a whole step, so the peak is actually visited.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup * self.total_steps as f64).round() as usize
    }
}

/// Learning rate at `step`; steps past the end stay at the final value.
pub fn one_cycle_lr(step: usize, cfg: &ScheduleConfig) -> f64 {
    let total = cfg.total_steps;
    if total == 0 {
        return cfg.lr_min;
    }
    let step = step.min(total);
    let warm = cfg.warmup_steps();
    let span = cfg.lr_max - cfg.lr_min;
    if step < warm {
        return cfg.lr_min + span * step as f64 / warm as f64;
    }
    if total == warm {
        return cfg.lr_max;
    }
    let p = (step - warm) as f64 / (total - warm) as f64;
    cfg.lr_min + span * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}
