//! Inverted dropout: survivors are scaled by `1/(1-q)` at train time so
//! eval mode is the plain identity.

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;
use rand::Rng;

pub struct Dropout {
    q: f64,
    /// Per-element multipliers from the last train-mode forward: `0` for
    /// dropped units, `1/(1-q)` for kept ones. `None` when the last forward
    /// was the identity (eval mode or `q == 0`).
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(q: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&q) {
            return Err(Error::invalid(format!(
                "dropout probability must be in [0,1), got {q}"
            )));
        }
        Ok(Dropout { q, mask: None })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// `q == 0` draws nothing from `rng`, so configurations without dropout
    /// consume no randomness.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut impl Rng) -> Tensor {
        if mode == Mode::Eval || self.q == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep_scale = 1.0 / (1.0 - self.q);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < self.q {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let mut out = x.clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        out
    }

    /// Applies the mask stored by the last forward; identity if the last
    /// forward was the identity.
    pub fn backward(&self, grad_out: &Tensor) -> Result<Tensor> {
        match &self.mask {
            None => Ok(grad_out.clone()),
            Some(mask) => {
                if mask.len() != grad_out.len() {
                    return Err(Error::invalid(format!(
                        "dropout mask holds {} elements, gradient has {}",
                        mask.len(),
                        grad_out.len()
                    )));
                }
                let mut out = grad_out.clone();
                for (v, m) in out.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn q_zero_is_identity_and_draws_nothing() {
        let mut d = Dropout::new(0.0).unwrap();
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut r1 = rng::stream(5, 0);
        let y = d.forward(&x, Mode::Train, &mut r1);
        assert_eq!(y, x);
        // rng untouched: next draw equals a fresh stream's first draw
        let mut r2 = rng::stream(5, 0);
        assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
    }

    #[test]
    fn eval_is_identity_regardless_of_q() {
        let mut d = Dropout::new(0.9).unwrap();
        let x = Tensor::full(&[10], 2.0);
        let mut r = rng::stream(6, 0);
        assert_eq!(d.forward(&x, Mode::Eval, &mut r), x);
    }

    #[test]
    fn invalid_q_rejected() {
        assert!(Dropout::new(1.0).is_err());
        assert!(Dropout::new(-0.1).is_err());
        assert!(Dropout::new(0.99).is_ok());
    }

    #[test]
    fn survivor_scaling_keeps_expectation() {
        // law of large numbers on a seeded draw: mean stays within 2%
        let mut d = Dropout::new(0.5).unwrap();
        let x = Tensor::full(&[100_000], 1.0);
        let mut r = rng::stream(7, 0);
        let y = d.forward(&x, Mode::Train, &mut r);
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        // every survivor is exactly 1/(1-q)
        for &v in y.data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_reuses_forward_mask() {
        let mut d = Dropout::new(0.4).unwrap();
        let x = Tensor::full(&[64], 1.0);
        let mut r = rng::stream(8, 0);
        let y = d.forward(&x, Mode::Train, &mut r);
        let g = d.backward(&Tensor::full(&[64], 1.0)).unwrap();
        // gradient passes exactly where the forward passed
        for (a, b) in y.data().iter().zip(g.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn same_stream_reproduces_mask() {
        let mut d1 = Dropout::new(0.3).unwrap();
        let mut d2 = Dropout::new(0.3).unwrap();
        let x = Tensor::full(&[32], 1.0);
        let y1 = d1.forward(&x, Mode::Train, &mut rng::stream(9, 1));
        let y2 = d2.forward(&x, Mode::Train, &mut rng::stream(9, 1));
        assert_eq!(y1, y2);
    }
}
