//! Linear warm-up followed by cosine annealing, evaluated per epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { eta_max: 1e-3, eta_min: 1e-6, warmup_epochs: 5, total_epochs: 80 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.eta_min && self.eta_min < self.eta_max) {
            return Err(Error::Config(format!(
                "schedule needs 0 <= eta_min < eta_max, got eta_min={} eta_max={}",
                self.eta_min, self.eta_max
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be smaller than total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at epoch `t` (fractional epochs allowed).
///
/// Warm-up ramps `eta_max * (t + 1) / W` for `t < W`; afterwards the cosine
/// runs over the post-warm-up span, reaching `eta_max` at `t = W` and
/// `eta_min` at `t = T`. Past `T` the rate is clamped to `eta_min`.
pub fn learning_rate(t: f64, schedule: &ScheduleConfig) -> f64 {
    let w = schedule.warmup_epochs as f64;
    let total = schedule.total_epochs as f64;
    if t > total {
        log::warn!("epoch {t} is past the schedule end {total}; clamping to eta_min");
        return schedule.eta_min;
    }
    if t < w {
        return schedule.eta_max * (t + 1.0) / w;
    }
    // eta_min + (eta_max - eta_min) * c, written as a convex combination so the
    // endpoints come out exact.
    let c = 0.5 * (1.0 + (std::f64::consts::PI * (t - w) / (total - w)).cos());
    schedule.eta_max * c + schedule.eta_min * (1.0 - c)
}
