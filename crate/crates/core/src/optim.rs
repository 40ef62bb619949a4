//! RMSProp with a linear warmup schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmsPropConfig {
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

/// Un-centred RMSProp without momentum:
/// `v ← αv + (1−α)g²`, `θ ← θ − lr·g / (√v + ε)`.
pub struct RmsProp {
    config: RmsPropConfig,
    square_avg: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            square_avg: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        let RmsPropConfig { alpha, eps } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.square_avg) {
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = alpha * *vi + (1.0 - alpha) * gi * gi;
                *pi -= lr * gi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Learning rate for zero-based `step`: ramps linearly from `base/warmup`
/// to `base` over the first `warmup` steps, then stays constant.
pub fn warmup_lr(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}
