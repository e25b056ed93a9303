//! 2-D convolution (cross-correlation) with same-padding and stride 1.
//!
//! Forward lowers each image to a column matrix (im2col) and multiplies by
//! the weight matrix; backward runs the two transposed products and
//! scatters the column gradient back (col2im). Accumulation order is fixed,
//! so results are reproducible bit-for-bit.

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::rng::uniform_fill;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use rand::Rng;

pub struct ConvLayer {
    /// Filters, shape `[out_ch, in_ch, k, k]`.
    pub weight: Param,
    /// Per-output-map bias, shape `[out_ch]`.
    pub bias: Param,
    in_ch: usize,
    out_ch: usize,
    k: usize,
}

impl ConvLayer {
    /// He-style init: weights uniform in `±sqrt(2/fan_in)`, bias zero.
    pub fn new(in_ch: usize, out_ch: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv kernel must be odd and positive, got {k}"
            )));
        }
        if in_ch == 0 || out_ch == 0 {
            return Err(Error::invalid("conv channel counts must be positive"));
        }
        let fan_in = (in_ch * k * k) as f64;
        let bound = (2.0 / fan_in).sqrt();
        let mut weight = Tensor::zeros(&[out_ch, in_ch, k, k]);
        uniform_fill(weight.data_mut(), -bound, bound, rng);
        Ok(ConvLayer {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            in_ch,
            out_ch,
            k,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        if x.rank() != 4 {
            return Err(Error::invalid(format!(
                "conv input must be rank 4, got {:?}",
                x.shape()
            )));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != self.in_ch {
            return Err(Error::invalid(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        // with same-padding the only hard floor is k - 2p = 1
        if h < self.k - 2 * self.pad() || w < self.k - 2 * self.pad() {
            return Err(Error::invalid(format!(
                "conv input {h}x{w} too small for kernel {}",
                self.k
            )));
        }
        Ok((n, h, w))
    }

    /// Cross-correlate `x` with the filters and add bias. Output spatial
    /// extents equal the input's.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w) = self.check_input(x)?;
        let (hw, patch) = (h * w, self.in_ch * self.k * self.k);
        let mut out = Tensor::zeros(&[n, self.out_ch, h, w]);
        let mut cols = vec![0.0; patch * hw];
        for img in 0..n {
            let src = &x.data()[img * self.in_ch * hw..(img + 1) * self.in_ch * hw];
            im2col(src, self.in_ch, h, w, self.k, self.pad(), &mut cols);
            let dst = &mut out.data_mut()[img * self.out_ch * hw..(img + 1) * self.out_ch * hw];
            gemm_nn(self.out_ch, patch, hw, self.weight.value.data(), &cols, dst);
            for o in 0..self.out_ch {
                let b = self.bias.value.data()[o];
                for v in &mut dst[o * hw..(o + 1) * hw] {
                    *v += b;
                }
            }
        }
        Ok(out)
    }

    /// Accumulate weight/bias gradients and return the input gradient.
    /// `x` must be the tensor passed to the matching `forward`.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (n, h, w) = self.check_input(x)?;
        let expect = [n, self.out_ch, h, w];
        if grad_out.shape() != expect {
            return Err(Error::shape_mismatch(grad_out.shape(), &expect));
        }
        let (hw, patch) = (h * w, self.in_ch * self.k * self.k);
        let mut grad_x = Tensor::zeros_like(x);
        let mut cols = vec![0.0; patch * hw];
        let mut grad_cols = vec![0.0; patch * hw];
        for img in 0..n {
            let src = &x.data()[img * self.in_ch * hw..(img + 1) * self.in_ch * hw];
            let gout = &grad_out.data()[img * self.out_ch * hw..(img + 1) * self.out_ch * hw];
            im2col(src, self.in_ch, h, w, self.k, self.pad(), &mut cols);
            // dW += dY . cols^T, db += row sums of dY
            gemm_nt(
                self.out_ch,
                hw,
                patch,
                gout,
                &cols,
                self.weight.grad.data_mut(),
            );
            for o in 0..self.out_ch {
                self.bias.grad.data_mut()[o] += gout[o * hw..(o + 1) * hw].iter().sum::<f64>();
            }
            // dcols = W^T . dY, then scatter back into the image grid
            grad_cols.fill(0.0);
            gemm_tn(
                patch,
                self.out_ch,
                hw,
                self.weight.value.data(),
                gout,
                &mut grad_cols,
            );
            let gx = &mut grad_x.data_mut()[img * self.in_ch * hw..(img + 1) * self.in_ch * hw];
            col2im(&grad_cols, self.in_ch, h, w, self.k, self.pad(), gx);
        }
        Ok(grad_x)
    }
}

/// Lower one `c_in x h x w` image into `cols[(c*k+dy)*k+dx, y*w+x] =
/// img[c, y+dy-pad, x+dx-pad]`, zero outside the image.
fn im2col(img: &[f64], c_in: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f64]) {
    debug_assert_eq!(cols.len(), c_in * k * k * h * w);
    let hw = h * w;
    for c in 0..c_in {
        let plane = &img[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let p = (c * k + dy) * k + dx;
                let dst = &mut cols[p * hw..(p + 1) * hw];
                // valid x range keeps x + dx - pad inside [0, w)
                let lo = pad.saturating_sub(dx).min(w);
                let hi = (w + pad - dx).min(w);
                for y in 0..h {
                    let row = &mut dst[y * w..(y + 1) * w];
                    let sy = y + dy;
                    if sy < pad || sy - pad >= h {
                        row.fill(0.0);
                        continue;
                    }
                    let srow = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                    row[..lo].fill(0.0);
                    if hi > lo {
                        row[lo..hi].copy_from_slice(&srow[lo + dx - pad..hi + dx - pad]);
                    }
                    row[hi.max(lo)..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image grid.
fn col2im(cols: &[f64], c_in: usize, h: usize, w: usize, k: usize, pad: usize, img: &mut [f64]) {
    debug_assert_eq!(cols.len(), c_in * k * k * h * w);
    let hw = h * w;
    for c in 0..c_in {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let p = (c * k + dy) * k + dx;
                let src = &cols[p * hw..(p + 1) * hw];
                let lo = pad.saturating_sub(dx).min(w);
                let hi = (w + pad - dx).min(w);
                if hi <= lo {
                    continue;
                }
                for y in 0..h {
                    let sy = y + dy;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let srow = &src[y * w + lo..y * w + hi];
                    let drow = &mut plane[(sy - pad) * w + lo + dx - pad..];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += s;
                    }
                }
            }
        }
    }
}
