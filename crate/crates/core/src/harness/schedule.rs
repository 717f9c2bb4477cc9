use super::config::{EpsSchedule, OptimizerConfig};
use crate::error::{Error, Result};

/// `max(floor, start * exp(-rate * iter))`.
pub fn epsilon_schedule(iter: usize, start: f64, rate: f64, floor: f64) -> Result<f64> {
    if !(floor > 0.0) || !(start >= floor) || !(rate >= 0.0) || !start.is_finite() {
        return Err(Error::domain(
            "epsilon-schedule",
            format!("need start >= floor > 0 and rate >= 0, got start={start} rate={rate} floor={floor}"),
        ));
    }
    Ok((start * (-rate * iter as f64).exp()).max(floor))
}

impl EpsSchedule {
    pub fn at(&self, iter: usize) -> Result<f64> {
        epsilon_schedule(iter, self.start, self.rate, self.floor)
    }
}

impl OptimizerConfig {
    /// Step size at `iter` of a run of `total` iterations.
    pub fn lr_at(&self, iter: usize, total: usize) -> f64 {
        let drops = self
            .lr_drops
            .iter()
            .filter(|&&f| iter >= (f * total as f64).floor() as usize)
            .count();
        self.lr * self.lr_drop_factor.powi(drops as i32)
    }
}
