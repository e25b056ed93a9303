//! Stochastic gradient descent with classical momentum.

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

/// Momentum SGD: `v = mu * v - lr * g`, then `p = p + v`. One optimizer
/// owns one parameter set; velocity buffers are allocated on the first
/// step and keyed by position, so always pass the same parameters in the
/// same order.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub const DEFAULT_LR: f64 = 0.01;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must be in [0,1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer built for {} parameters, given {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if v.shape() != p.value.shape() {
                return Err(Error::shape_mismatch(v.shape(), p.value.shape()));
            }
            for ((vi, &gi), pi) in v
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(p.value.data_mut())
            {
                *vi = self.momentum * *vi - self.lr * gi;
                *pi += *vi;
            }
        }
        Ok(())
    }
}
