//! Spatial batch normalization.
//!
//! Each feature map is normalized over (batch, height, width) with its own
//! statistics: batch statistics in train mode, running averages in eval
//! mode. Train mode caches the normalized activations for the analytic
//! backward pass and refreshes the running averages.

use crate::error::{Error, Result};
use crate::nn::{Mode, Param};
use crate::tensor::Tensor;

/// Running-average retention per step; 0.9 keeps roughly the last ten
/// batches' worth of statistics.
const DECAY: f64 = 0.9;

pub struct BatchNorm {
    /// Per-map scale (gamma), shape `[C]`, initialized to 1.
    pub scale: Param,
    /// Per-map shift (beta), shape `[C]`, initialized to 0.
    pub shift: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    eps: f64,
    channels: usize,
    cache: Option<Cache>,
}

struct Cache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("batchnorm needs at least one channel"));
        }
        Ok(BatchNorm {
            scale: Param::new(Tensor::full(&[channels], 1.0)),
            shift: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            channels,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        if x.rank() != 4 || x.shape()[1] != self.channels {
            return Err(Error::invalid(format!(
                "batchnorm expects [N, {}, H, W], got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let hw = x.shape()[2] * x.shape()[3];
        Ok((n, hw))
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, hw) = self.check_input(x)?;
        let m = n * hw;
        if mode == Mode::Train && m < 2 {
            return Err(Error::invalid(format!(
                "batchnorm train mode needs batch*H*W >= 2, got {m}"
            )));
        }
        let c = self.channels;
        let mut out = Tensor::zeros_like(x);
        let mut xhat = Tensor::zeros_like(x);
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for img in 0..n {
                        let base = (img * c + ch) * hw;
                        sum += x.data()[base..base + hw].iter().sum::<f64>();
                    }
                    let mean = sum / m as f64;
                    let mut sq = 0.0;
                    for img in 0..n {
                        let base = (img * c + ch) * hw;
                        for &v in &x.data()[base..base + hw] {
                            let d = v - mean;
                            sq += d * d;
                        }
                    }
                    (mean, sq / m as f64)
                }
                Mode::Eval => (self.running_mean.data()[ch], self.running_var.data()[ch]),
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (self.scale.value.data()[ch], self.shift.value.data()[ch]);
            for img in 0..n {
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x.data()[i] - mean) * istd;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = g * xh + b;
                }
            }
            if mode == Mode::Train {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = DECAY * *rm + (1.0 - DECAY) * mean;
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = DECAY * *rv + (1.0 - DECAY) * var;
            }
        }
        self.cache = match mode {
            Mode::Train => Some(Cache { xhat, inv_std }),
            Mode::Eval => None,
        };
        Ok(out)
    }

    /// Backward through the train-mode forward, including the dependence of
    /// the batch statistics on the input:
    /// `dx = g*istd * (dy - mean(dy) - xhat * mean(dy*xhat))`.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("batchnorm backward without a train-mode forward"))?;
        if grad_out.shape() != cache.xhat.shape() {
            return Err(Error::shape_mismatch(grad_out.shape(), cache.xhat.shape()));
        }
        let (n, hw) = self.check_input(grad_out)?;
        let m = (n * hw) as f64;
        let c = self.channels;
        let mut grad_x = Tensor::zeros_like(grad_out);
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for img in 0..n {
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    sum_dy += grad_out.data()[i];
                    sum_dy_xhat += grad_out.data()[i] * cache.xhat.data()[i];
                }
            }
            self.shift.grad.data_mut()[ch] += sum_dy;
            self.scale.grad.data_mut()[ch] += sum_dy_xhat;
            let g_istd = self.scale.value.data()[ch] * cache.inv_std[ch];
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            for img in 0..n {
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    grad_x.data_mut()[i] = g_istd
                        * (grad_out.data()[i] - mean_dy - cache.xhat.data()[i] * mean_dy_xhat);
                }
            }
        }
        Ok(grad_x)
    }
}
