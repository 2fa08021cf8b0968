//! The piecewise-linear layer weight `α_i(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer `i ≥ 2` starts ramping at `T_i = T_1 + (i − 1)·Δt` and saturates
/// `Δt` epochs later. Layer 1 is always fully weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    #[serde(default = "default_delta_t")]
    pub delta_t: f64,
    #[serde(default)]
    pub t1: f64,
    pub num_focus_layers: usize,
}

fn default_delta_t() -> f64 {
    2.0
}

impl ScheduleParams {
    pub fn new(delta_t: f64, t1: f64, num_focus_layers: usize) -> Result<Self> {
        let s = ScheduleParams {
            delta_t,
            t1,
            num_focus_layers,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_t.is_finite() && self.delta_t > 0.0) {
            return Err(Error::Config(format!("delta_t must be positive, got {}", self.delta_t)));
        }
        if !(self.t1.is_finite() && self.t1 >= 0.0) {
            return Err(Error::Config(format!("t1 must be non-negative, got {}", self.t1)));
        }
        if self.num_focus_layers == 0 {
            return Err(Error::Config("at least one focus layer is required".into()));
        }
        Ok(())
    }

    /// `T_i`, the epoch at which layer `i` begins to ramp.
    pub fn start(&self, i: usize) -> f64 {
        self.t1 + (i as f64 - 1.0) * self.delta_t
    }

    /// First epoch at which every focus layer is saturated.
    pub fn saturation_epoch(&self) -> f64 {
        self.start(self.num_focus_layers) + self.delta_t
    }

    /// `α_1(t) … α_K(t)`.
    pub fn weights(&self, t: f64) -> Vec<f64> {
        (1..=self.num_focus_layers)
            .map(|i| layer_weight(i, t, self).expect("index in range"))
            .collect()
    }
}

pub fn layer_weight(i: usize, t: f64, schedule: &ScheduleParams) -> Result<f64> {
    if i < 1 {
        return Err(Error::Contract("layer index starts at 1".into()));
    }
    if !(t >= 0.0) {
        return Err(Error::Contract(format!("epoch must be non-negative, got {t}")));
    }
    if i == 1 {
        return Ok(1.0);
    }
    let start = schedule.start(i);
    Ok(if t < start {
        0.0
    } else if t < start + schedule.delta_t {
        (t - start) / schedule.delta_t
    } else {
        1.0
    })
}
