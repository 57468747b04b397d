use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Linear warm-up followed by a cosine decay to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub cosine_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_steps: 200,
            cosine_steps: 5000,
            lr_start: 0.008,
            lr_peak: 0.08,
        }
    }
}

impl Schedule {
    pub fn total_steps(&self) -> usize {
        self.warmup_steps + self.cosine_steps
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.lr_start + (self.lr_peak - self.lr_start) * f;
        }
        if self.cosine_steps == 0 {
            return 0.0;
        }
        let s = (step - self.warmup_steps).min(self.cosine_steps) as f64;
        let cos = (std::f64::consts::PI * s / self.cosine_steps as f64).cos();
        // cos(π) is not exactly −1 in floating point.
        if s as usize == self.cosine_steps {
            return 0.0;
        }
        self.lr_peak * 0.5 * (1.0 + cos)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= 0.0 && self.lr_peak > 0.0) || !self.lr_peak.is_finite() {
            return Err(Error::Config("learning rates must be non-negative and finite".into()));
        }
        Ok(())
    }
}

/// `p ← p − lr(step)·multiplier·grad`, then clears gradients.
///
/// Any non-finite gradient aborts before a single value is touched.
pub fn sgd_step(store: &mut ParamStore, schedule: &Schedule, step: usize) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        if store.grad(id).data().iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                param: store.entry(id).name.clone(),
                step,
            });
        }
    }
    let lr = schedule.lr(step);
    for id in ids {
        let e = store.entry_mut(id);
        let m = lr * e.grad_multiplier;
        for (p, g) in e.value.data_mut().iter_mut().zip(e.grad.data()) {
            *p -= m * g;
        }
    }
    store.zero_grads();
    Ok(())
}
