//! Fully-connected layer: `y = x W^T + b`.

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::rng::uniform_fill;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use rand::Rng;

pub struct FcLayer {
    /// Weights, shape `[out, in]`.
    pub weight: Param,
    /// Bias, shape `[out]`.
    pub bias: Param,
    in_dim: usize,
    out_dim: usize,
}

impl FcLayer {
    /// He-style init: weights uniform in `±sqrt(2/fan_in)`, bias zero.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("fc dimensions must be positive"));
        }
        let bound = (2.0 / in_dim as f64).sqrt();
        let mut weight = Tensor::zeros(&[out_dim, in_dim]);
        uniform_fill(weight.data_mut(), -bound, bound, rng);
        Ok(FcLayer {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.rank() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::invalid(format!(
                "fc expects [batch, {}], got {:?}",
                self.in_dim,
                x.shape()
            )));
        }
        Ok(x.shape()[0])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.check_input(x)?;
        let mut out = Tensor::zeros(&[n, self.out_dim]);
        gemm_nt(
            n,
            self.in_dim,
            self.out_dim,
            x.data(),
            self.weight.value.data(),
            out.data_mut(),
        );
        for row in 0..n {
            let r = &mut out.data_mut()[row * self.out_dim..(row + 1) * self.out_dim];
            for (v, b) in r.iter_mut().zip(self.bias.value.data()) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Accumulate weight/bias gradients and return the input gradient.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let n = self.check_input(x)?;
        let expect = [n, self.out_dim];
        if grad_out.shape() != expect {
            return Err(Error::shape_mismatch(grad_out.shape(), &expect));
        }
        // dW += dY^T . x
        gemm_tn(
            self.out_dim,
            n,
            self.in_dim,
            grad_out.data(),
            x.data(),
            self.weight.grad.data_mut(),
        );
        for row in 0..n {
            let g = &grad_out.data()[row * self.out_dim..(row + 1) * self.out_dim];
            for (b, v) in self.bias.grad.data_mut().iter_mut().zip(g) {
                *b += v;
            }
        }
        // dX = dY . W
        let mut grad_x = Tensor::zeros(&[n, self.in_dim]);
        gemm_nn(
            n,
            self.out_dim,
            self.in_dim,
            grad_out.data(),
            self.weight.value.data(),
            grad_x.data_mut(),
        );
        Ok(grad_x)
    }
}
