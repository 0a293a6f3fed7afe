//! Adam with exponential learning-rate annealing and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    /// steps over which the rate decays from `lr_start` to `lr_end`
    pub anneal_steps: usize,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            lr_start: 1e-3,
            lr_end: 1e-6,
            anneal_steps: 5000,
            weight_decay: 1e-6,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.lr_start >= 0.0 && self.lr_end >= 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "Adam rates must be non-negative and eps positive".into(),
            ));
        }
        Ok(())
    }

    /// `lr_start · (lr_end / lr_start)^(step / anneal_steps)`, held at
    /// `lr_end` afterwards.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.anneal_steps == 0 || self.lr_start == 0.0 || self.lr_end == 0.0 {
            return self.lr_start;
        }
        let frac = (step as f64 / self.anneal_steps as f64).min(1.0);
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One update at 0-based `step`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
    step: usize,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    let lr = cfg.learning_rate(step);
    let t = step as i32 + 1;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {:?} grad {:?}", p.shape(), g.shape()),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gv;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gv * gv;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *pv = *pv * decay - lr * update;
        }
    }
    Ok(())
}
