//! Adam optimizer over a model's parameter slots.
//!
//! Moment buffers align with the model's parameter visit order; a slot
//! whose gradient is handed in as `None` (frozen embeddings, for example)
//! is skipped entirely, moments included.

use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::error::{Error, Result};
use crate::model::Model;

/// Update-rule constants. Only the learning rate is experiment-specific;
/// the moment decays and epsilon use the standard published values.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(learning_rate: f64) -> AdamParams {
        AdamParams { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state: first/second moment per parameter entry plus the step count
/// driving bias correction.
pub struct Adam {
    params: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    /// Fresh zeroed moments shaped after `model`'s parameters.
    pub fn new(params: AdamParams, model: &Model) -> Adam {
        let mut m = Vec::new();
        model.visit_params(&mut |_, value| m.push(vec![0.0; value.numel()]));
        let v = m.clone();
        Adam { params, m, v, t: 0 }
    }

    /// Applies one update. `grads` must align with the parameter visit
    /// order; `None` slots are left untouched.
    pub fn step(&mut self, model: &mut Model, grads: &[Option<Value>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient list has {} slots, model has {}",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);

        let mut slot = 0usize;
        let mut failure: Option<Error> = None;
        model.visit_params_mut(&mut |name, value| {
            let idx = slot;
            slot += 1;
            let Some(grad) = &grads[idx] else { return };
            if failure.is_some() {
                return;
            }
            if grad.shape() != value.shape() {
                failure = Some(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "gradient for {name} is {:?}, parameter is {:?}",
                        grad.shape(),
                        value.shape()
                    ),
                });
                return;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (i, (x, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g;
                v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g * g;
                *x -= p.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + p.eps);
                if !x.is_finite() && failure.is_none() {
                    failure = Some(Error::Diverged(format!(
                        "parameter {name}[{i}] became non-finite at step {}",
                        self.t
                    )));
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }
}
