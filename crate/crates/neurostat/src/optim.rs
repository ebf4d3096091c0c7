//! Trainable parameters and the Adam update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam hyperparameters. Defaults are lr 1e-3, β1 0.9, β2 0.999, ε 1e-8.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A named trainable tensor with its Adam moment estimates.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    pub value: Tensor,
    grad: Option<Tensor>,
    adam_m: Tensor,
    adam_v: Tensor,
    step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            value,
            grad: None,
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Adds `grad` into the parameter's gradient accumulator.
    pub fn accumulate_grad(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.value.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.value.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        match &mut self.grad {
            Some(g) => {
                for (slot, &v) in g.data_mut().iter_mut().zip(grad) {
                    *slot += v;
                }
            }
            None => {
                self.grad = Some(Tensor::new(self.value.shape().to_vec(), grad.to_vec())?);
            }
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Replaces the value, resetting Adam state if the shape changes.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: self.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.value = value;
        Ok(())
    }
}

/// One Adam update with bias correction, applied in place. The gradient is
/// left on the parameter for the caller to reset.
pub fn adam_step(param: &mut Parameter, cfg: &AdamConfig) -> Result<()> {
    let grad = param.grad.as_ref().ok_or_else(|| Error::MissingGrad {
        name: param.name.clone(),
    })?;
    param.step_count += 1;
    let t = param.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let g = grad.data();
    let m = param.adam_m.data_mut();
    let v = param.adam_v.data_mut();
    let value = param.value.data_mut();
    for i in 0..value.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
