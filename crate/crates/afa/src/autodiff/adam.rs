//! Adam optimizer with linear warmup and optional linear decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::Tensor;
use crate::{Error, Result};

/// Learning-rate schedule: linear warmup from 0 to the base rate over
/// `warmup_steps`, then either constant or linear decay to 0 at
/// `total_steps`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub decay: bool,
}

impl LrSchedule {
    pub fn rate(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if !self.decay {
            return self.base_lr;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        self.base_lr * (self.total_steps - step) as f64 / span
    }
}

/// Per-parameter first/second moment state.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: usize,
    pub schedule: LrSchedule,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(params: &[Tensor], schedule: LrSchedule) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            schedule,
        }
    }

    /// One Adam step with default betas, bias correction and the scheduled
    /// rate. `grads[i] = None` leaves parameter `i` untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{} params, {} states, {} grads", params.len(), self.m.len(), grads.len()),
            });
        }
        self.step += 1;
        let lr = self.schedule.rate(self.step);
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if g.shape() != params[i].shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("param {:?} vs grad {:?}", params[i].shape(), g.shape()),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(lr)
    }
}
