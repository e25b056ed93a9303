//! Neural-network layers: convolution, fully-connected, batch
//! normalization, dropout, activations, and losses.
//!
//! Layers are plain structs owning their parameters. `forward` caches
//! whatever the matching `backward` needs; `backward` consumes the gradient
//! of the loss with respect to the layer output and returns the gradient
//! with respect to the layer input, accumulating parameter gradients into
//! each [`Param`]'s `grad` buffer along the way.

pub mod batchnorm;
pub mod conv;
pub mod dropout;
pub mod linear;
pub mod loss;

pub use batchnorm::BatchNorm;
pub use conv::ConvLayer;
pub use dropout::Dropout;
pub use linear::FcLayer;
pub use loss::{l1_penalty, l1_penalty_backward, l2_loss, l2_loss_backward, softmax_nll};

use crate::tensor::Tensor;

/// Train or eval phase. Controls batch-norm statistics and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros_like(&value);
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Elementwise max(0, x).
pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient of relu: passes `grad` where the *input* was strictly positive.
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Tensor {
    debug_assert_eq!(input.shape(), grad.shape());
    let mut out = grad.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    out
}
