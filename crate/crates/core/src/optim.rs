//! Optimizers and the learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamId;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are keyed by [`ParamId`]; a new
/// instance is used for each training phase.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter used for bias correction.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to `t` from its stored gradient; parameters without a gradient are skipped.
    pub fn update(&mut self, id: ParamId, t: &mut Tensor, lr: f64, decay: bool) -> Result<()> {
        if self.step == 0 {
            return Err(Error::contract("AdamW::update called before begin_step"));
        }
        let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
            return Ok(());
        };
        let n = t.numel();
        let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::Dimension {
                op: "adamw",
                left: vec![m.len()],
                right: t.shape().to_vec(),
            });
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let wd = if decay { lr * weight_decay } else { 0.0 };
        for (((w, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= wd * *w;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }

    /// Bytes of first and second moment buffers.
    pub fn live_bytes(&self) -> usize {
        self.moments
            .values()
            .map(|(m, v)| (m.len() + v.len()) * std::mem::size_of::<f64>())
            .sum()
    }
}

/// Plain gradient descent `w -= lr * g`.
pub fn sgd_update(t: &mut Tensor, lr: f64) {
    if let Some(grad) = t.grad().map(<[f64]>::to_vec) {
        t.data_mut().iter_mut().zip(grad).for_each(|(w, g)| *w -= lr * g);
    }
}

/// Linear warmup over the first `ceil(warmup_frac * total)` steps, then constant.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    let warm = (warmup_frac * total as f64).ceil() as usize;
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else {
        base
    }
}
