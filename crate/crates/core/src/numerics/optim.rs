//! SGD with momentum and coupled weight decay, plus the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// One optimizer step:
/// `velocity ← momentum·velocity + (grad + weight_decay·value)`,
/// `value ← value − lr·velocity`.
///
/// Frozen entries are untouched. Every gradient is zeroed afterwards. If any
/// trainable gradient is non-finite the step is aborted before anything changes.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if let Some(bad) = params.iter().find(|e| e.trainable && !e.grad.is_finite()) {
        return Err(Error::NonFiniteGradient {
            path: bad.path.clone(),
        });
    }
    let ids: Vec<_> = params.canonical_ids().collect();
    for id in ids {
        let e = params.entry_mut(id);
        if !e.trainable {
            continue;
        }
        let wd = if e.decay { weight_decay } else { 0.0 };
        let value = e.value.data_mut();
        let grad = e.grad.data();
        let vel = e.velocity.data_mut();
        for i in 0..value.len() {
            vel[i] = momentum * vel[i] + (grad[i] + wd * value[i]);
            value[i] -= lr * vel[i];
        }
    }
    params.zero_grads();
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_iters: usize,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn cosine(base_lr: f64, total_iters: usize) -> Self {
        Self {
            base_lr,
            total_iters,
            kind: ScheduleKind::Cosine,
        }
    }

    /// `base_lr · (1 + cos(π·t/total)) / 2`, clamped to `t ≤ total`.
    pub fn lr(&self, t: usize) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => {
                if self.total_iters == 0 {
                    return self.base_lr;
                }
                let frac = t.min(self.total_iters) as f64 / self.total_iters as f64;
                // cos(π) is not exactly -1 in floating point
                if t >= self.total_iters {
                    return 0.0;
                }
                self.base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
            }
        }
    }
}
