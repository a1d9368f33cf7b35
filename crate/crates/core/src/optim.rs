//! AdamW with decoupled weight decay, plus the step learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {name} at element {index}: {value}")]
    NonFiniteGradient { name: String, index: usize, value: f64 },
    #[error("optimizer expects {expected} parameter tensors, got {actual}")]
    Count { expected: usize, actual: usize },
    #[error("parameter {name}: gradient shape {grad:?} does not match {param:?}")]
    Shape {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<S> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    /// One AdamW update. `params`, `grads` and `names` are parallel; the
    /// whole step is rejected before any mutation if a gradient is not
    /// finite.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &[&Tensor<S>],
        names: &[&str],
        lr: f64,
    ) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::Count {
                expected: self.m.len(),
                actual: params.len().min(grads.len()),
            });
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(k).copied().unwrap_or("?").to_string();
            if p.shape() != g.shape() {
                return Err(OptimError::Shape {
                    name,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if let Some((index, value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    name,
                    index,
                    value: value.as_f64(),
                });
            }
        }

        self.t += 1;
        let c = self.config;
        let b1 = S::lit(c.beta1);
        let b2 = S::lit(c.beta2);
        let bc1 = S::one() - S::lit(c.beta1.powi(self.t as i32));
        let bc2 = S::one() - S::lit(c.beta2.powi(self.t as i32));
        let lr_s = S::lit(lr);
        let decay = S::one() - S::lit(lr * c.weight_decay);
        let eps = S::lit(c.eps);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (S::one() - b1) * gv;
                v[i] = b2 * v[i] + (S::one() - b2) * gv * gv;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *pv = *pv * decay - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Constant learning rate that is multiplied by `factor` from
/// `decay_epoch` onward (epochs are 1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base_lr: f64,
    pub factor: f64,
    pub decay_epoch: usize,
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.base_lr * self.factor
        } else {
            self.base_lr
        }
    }
}
