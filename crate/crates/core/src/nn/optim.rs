use serde::{Deserialize, Serialize};

use super::{Grads, TinyNet};
use crate::{Error, Result};

/// One-cycle learning rate: cosine warm-up from `peak_lr / start_div` to `peak_lr` over the
/// first `warmup_fraction` of steps, then cosine decay to `peak_lr / (start_div * end_div)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneCycleSchedule {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub start_div: f64,
    pub end_div: f64,
}

impl Default for OneCycleSchedule {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            total_steps: 1,
            warmup_fraction: 0.3,
            start_div: 25.0,
            end_div: 1e4,
        }
    }
}

fn cosine(from: f64, to: f64, progress: f64) -> f64 {
    to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

impl OneCycleSchedule {
    pub fn with_steps(peak_lr: f64, total_steps: usize) -> Self {
        Self {
            peak_lr,
            total_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0)
            || self.total_steps == 0
            || !(0.0..=1.0).contains(&self.warmup_fraction)
            || !(self.start_div >= 1.0)
            || !(self.end_div >= 1.0)
        {
            return Err(Error::InvalidArgument(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    pub fn peak_step(&self) -> usize {
        (self.warmup_fraction * (self.total_steps.saturating_sub(1)) as f64).round() as usize
    }

    pub fn lr(&self, step: usize) -> f64 {
        let initial = self.peak_lr / self.start_div;
        let last = initial / self.end_div;
        let peak = self.peak_step();
        if step <= peak {
            if peak == 0 {
                return self.peak_lr;
            }
            cosine(initial, self.peak_lr, step as f64 / peak as f64)
        } else {
            let span = (self.total_steps - 1 - peak).max(1) as f64;
            cosine(self.peak_lr, last, ((step - peak) as f64 / span).min(1.0))
        }
    }
}

/// SGD with heavy-ball momentum: `v <- mu v + g; p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &TinyNet, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: net
                .params()
                .iter()
                .map(|p| vec![0.0; p.data.len()])
                .collect(),
        }
    }

    pub fn step(
        &mut self,
        net: &mut TinyNet,
        grads: &Grads,
        schedule: &OneCycleSchedule,
        step: usize,
    ) -> Result<()> {
        if step >= schedule.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} beyond schedule of {} steps",
                schedule.total_steps
            )));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        let lr = schedule.lr(step);
        for ((p, v), g) in net
            .params_mut()
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(&grads.tensors)
        {
            for ((x, vel), &gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = self.momentum * *vel + gi;
                *x = (*x as f64 - lr * *vel) as f32;
            }
        }
        if !net.is_finite() {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
        Ok(())
    }
}
