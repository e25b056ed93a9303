//! Dense rank-1..4 tensors of `f64` in row-major NCHW order.
//!
//! The one value type all layers trade in. No broadcasting, no views, no
//! strides: shape plus a contiguous buffer. Every operation is a pure
//! function with a fixed accumulation order, so repeated calls on the same
//! inputs are bitwise identical.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::invalid(format!(
            "tensor rank must be 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

impl Tensor {
    /// All-zeros tensor. Panics on an invalid shape; use [`Tensor::from_vec`]
    /// when the shape comes from untrusted input.
    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the buffer under a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} ({} values) to {shape:?} ({expect} values)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        debug_assert_eq!(self.rank(), 4);
        let (_, cc, hh, ww) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn set4(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        debug_assert_eq!(self.rank(), 4);
        let (_, cc, hh, ww) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cc + c) * hh + h) * ww + w] = v;
    }

    pub fn elementwise(&self, other: &Tensor, op: ElemOp) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch(&self.shape, &other.shape));
        }
        let mut out = Tensor::zeros_like(self);
        let (a, b, o) = (&self.data, &other.data, &mut out.data);
        match op {
            ElemOp::Add => {
                for i in 0..a.len() {
                    o[i] = a[i] + b[i];
                }
            }
            ElemOp::Sub => {
                for i in 0..a.len() {
                    o[i] = a[i] - b[i];
                }
            }
            ElemOp::Mul => {
                for i in 0..a.len() {
                    o[i] = a[i] * b[i];
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElemOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElemOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElemOp::Mul)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch(&self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Rank-2 matrix product. Each output element accumulates over the inner
    /// index in ascending order, matching the naive triple loop exactly.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::invalid(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape_mismatch(&self.shape, &other.shape));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(m, k, n, &self.data, &other.data, &mut out.data);
        Ok(out)
    }

    /// Zero-pad the two spatial dimensions of an NCHW tensor by `pad` on
    /// every side.
    pub fn pad2d(&self, pad: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::invalid(format!(
                "pad2d needs rank 4, got {:?}",
                self.shape
            )));
        }
        if pad == 0 {
            return Ok(self.clone());
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        for img in 0..n * c {
            let src = &self.data[img * h * w..(img + 1) * h * w];
            let dst = &mut out.data[img * ho * wo..(img + 1) * ho * wo];
            for row in 0..h {
                let d = (row + pad) * wo + pad;
                dst[d..d + w].copy_from_slice(&src[row * w..(row + 1) * w]);
            }
        }
        Ok(out)
    }

    /// Reduce over the given axes. Reduced axes are removed from the shape;
    /// reducing every axis yields a rank-1 tensor of length 1. Accumulation
    /// follows linear index order.
    pub fn reduce(&self, axes: &[usize], op: ReduceOp) -> Result<Tensor> {
        let rank = self.rank();
        let mut reduce_axis = [false; MAX_RANK];
        for &a in axes {
            if a >= rank {
                return Err(Error::invalid(format!(
                    "axis {a} out of range for rank {rank}"
                )));
            }
            reduce_axis[a] = true;
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&a| !reduce_axis[a])
            .map(|a| self.shape[a])
            .collect();
        let out_shape = if out_shape.is_empty() {
            vec![1]
        } else {
            out_shape
        };
        let out_len: usize = out_shape.iter().product();
        let init = match op {
            ReduceOp::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut out = vec![init; out_len];

        // Strides of the output laid over the kept axes of the input.
        let mut out_strides = [0usize; MAX_RANK];
        let mut s = 1;
        for a in (0..rank).rev() {
            if !reduce_axis[a] {
                out_strides[a] = s;
                s *= self.shape[a];
            }
        }
        let mut idx = [0usize; MAX_RANK];
        for &v in &self.data {
            let mut o = 0;
            for a in 0..rank {
                o += idx[a] * out_strides[a];
            }
            match op {
                ReduceOp::Sum | ReduceOp::Mean => out[o] += v,
                ReduceOp::Max => {
                    if v > out[o] {
                        out[o] = v;
                    }
                }
            }
            // advance the multi-index
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < self.shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        if op == ReduceOp::Mean {
            let count: usize = (0..rank)
                .filter(|&a| reduce_axis[a])
                .map(|a| self.shape[a])
                .product();
            let inv = 1.0 / count as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        Tensor::from_vec(&out_shape, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// True iff `|a[i] - b[i]| <= atol + rtol * |b[i]|` for every element.
    pub fn allclose(&self, other: &Tensor, rtol: f64, atol: f64) -> Result<bool> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch(&self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .all(|(&a, &b)| (a - b).abs() <= atol + rtol * b.abs()))
    }
}

/// `out += a * b` for row-major `a: m x k`, `b: k x n`.
///
/// The k loop is outermost per output row, so each `out[i][j]` accumulates
/// its k terms in ascending order -- the same order as the naive triple loop
/// -- while the innermost loop streams contiguous rows of `b`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += ail * brow[j];
            }
        }
    }
}

/// `out += a * b^T` for row-major `a: m x k`, `b: n x k`.
///
/// Both operands stream along their rows; eight independent accumulators let
/// the dot product vectorize.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            orow[j] += dot(arow, brow);
        }
    }
}

/// `out += a^T * b` for row-major `a: k x m`, `b: k x n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let ali = arow[i];
            if ali == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ali * brow[j];
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let av = &a[c * LANES..(c + 1) * LANES];
        let bv = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += av[l] * bv[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f64>() + tail
}
