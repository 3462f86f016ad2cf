//! Learning-rate schedule and AdamW.

use serde::{Deserialize, Serialize};

use crate::tensor::{shape_err, Tensor};
use crate::{Error, Result};

/// Linear warm-up from 0 to `base_lr`, then cosine decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup: usize, total: usize) -> Result<Self> {
        if warmup > total {
            return Err(Error::Config(format!("warmup_steps {warmup} exceeds total_steps {total}")));
        }
        if !(base_lr.is_finite() && base_lr >= 0.0) {
            return Err(Error::Config(format!("base_lr must be finite and non-negative, got {base_lr}")));
        }
        Ok(Self { base_lr, warmup, total })
    }

    /// The schedule at a real-valued step. The decay branch starts at
    /// `t == warmup`, where `cos(0) = 1` gives exactly `base_lr`.
    pub fn lr_continuous(&self, t: f64) -> f64 {
        let w = self.warmup as f64;
        if t < w {
            return self.base_lr * t / w;
        }
        let span = (self.total - self.warmup) as f64;
        if span == 0.0 {
            return self.base_lr;
        }
        let progress = (t - w) / span;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub fn lr_at(step: usize, schedule: &Schedule) -> Result<f64> {
    if step > schedule.total {
        return Err(Error::Range {
            step,
            total: schedule.total,
        });
    }
    Ok(schedule.lr_continuous(step as f64).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments, one pair per parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One AdamW update: `p ← p·(1 − lr·wd)` on decayed slots, then the
/// bias-corrected Adam step. `decay[i]` says whether slot `i` is decayed.
pub fn adamw_step(
    params: &mut [Tensor],
    decay: &[bool],
    grads: &[Tensor],
    opt: &mut OptState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || opt.m.len() != n || opt.v.len() != n {
        return Err(shape_err(
            "adamw_step",
            format!(
                "{n} params, {} grads, {} decay flags, {} moments",
                grads.len(),
                decay.len(),
                opt.m.len()
            ),
        )
        .into());
    }
    for i in 0..n {
        if grads[i].shape() != params[i].shape() || opt.m[i].shape() != params[i].shape() {
            return Err(shape_err(
                "adamw_step",
                format!("slot {i}: param {:?}, grad {:?}", params[i].shape(), grads[i].shape()),
            )
            .into());
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..n {
        let shrink = if decay[i] { 1.0 - lr * hp.weight_decay } else { 1.0 };
        let p = params[i].data_mut();
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        for (j, &g) in grads[i].data().iter().enumerate() {
            if decay[i] {
                p[j] *= shrink;
            }
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}
