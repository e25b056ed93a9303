//! What/where pooling and its inverses.
//!
//! Pooling splits each non-overlapping s x s region into complementary
//! halves: the *what* (the pooled magnitude) flows up the encoder, the
//! *where* (the position the magnitude came from) crosses laterally to the
//! decoder, whose unpooling puts the what back where it was found. Hard
//! mode keeps the argmax as an integer switch; soft mode keeps a
//! temperature-beta softmax centroid with coordinates in [-1, 1], which is
//! differentiable in both outputs. Plain upsampling -- copy the what over
//! the whole region -- is the baseline without any where.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoolMode {
    Hard,
    Soft { beta: f64 },
}

impl PoolMode {
    pub fn soft(beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::invalid(format!(
                "soft pooling needs finite beta >= 0, got {beta}"
            )));
        }
        Ok(PoolMode::Soft { beta })
    }
}

/// The lateral half of a pooling result.
#[derive(Clone, Debug, PartialEq)]
pub enum WhereMap {
    /// Row-major argmax index within each region, stored as exact small
    /// floats in `[0, s^2)`.
    Hard(Tensor),
    /// Softmax centroid per region; each coordinate in `[-1, 1]`.
    /// `x` follows columns, `y` follows rows.
    Soft { x: Tensor, y: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolOutput {
    /// Pooled values, shape `[N, C, H/s, W/s]`.
    pub what: Tensor,
    pub where_map: WhereMap,
    pub size: usize,
}

impl PoolOutput {
    pub fn mode_is_hard(&self) -> bool {
        matches!(self.where_map, WhereMap::Hard(_))
    }
}

/// Center of cell `i` out of `s`, normalized so the extremes land exactly
/// on -1 and 1; a single cell sits at 0.
pub fn cell_coord(i: usize, s: usize) -> f64 {
    if s == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (s - 1) as f64
    }
}

fn check_pool_input(x: &Tensor, s: usize) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::invalid(format!(
            "pooling expects rank 4, got {:?}",
            x.shape()
        )));
    }
    if s == 0 {
        return Err(Error::invalid("pool size must be positive"));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!(
            "spatial extents {h}x{w} not divisible by pool size {s}"
        )));
    }
    Ok((n, c, h, w))
}

fn check_pool_output(p: &PoolOutput) -> Result<(usize, usize, usize, usize)> {
    let shape = p.what.shape();
    if p.what.rank() != 4 {
        return Err(Error::invalid(format!(
            "pooled what must be rank 4, got {shape:?}"
        )));
    }
    if p.size == 0 {
        return Err(Error::invalid("pool size must be positive"));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Max-pool each s x s region, recording the row-major argmax as the
/// switch. Ties break toward the smallest index.
pub fn hard_pool(x: &Tensor, s: usize) -> Result<PoolOutput> {
    let (n, c, h, w) = check_pool_input(x, s)?;
    let (ho, wo) = (h / s, w / s);
    let mut what = Tensor::zeros(&[n, c, ho, wo]);
    let mut switch = Tensor::zeros(&[n, c, ho, wo]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let base = plane * ho * wo;
        for ry in 0..ho {
            for rx in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for dy in 0..s {
                    for dx in 0..s {
                        let v = src[(ry * s + dy) * w + rx * s + dx];
                        if v > best {
                            best = v;
                            arg = dy * s + dx;
                        }
                    }
                }
                what.data_mut()[base + ry * wo + rx] = best;
                switch.data_mut()[base + ry * wo + rx] = arg as f64;
            }
        }
    }
    Ok(PoolOutput {
        what,
        where_map: WhereMap::Hard(switch),
        size: s,
    })
}

/// Route `grad_what` back to each region's switch position. The switch
/// itself gets no gradient (hard max is not differentiable in position).
pub fn hard_pool_backward(p: &PoolOutput, grad_what: &Tensor) -> Result<Tensor> {
    let (n, c, ho, wo) = check_pool_output(p)?;
    if grad_what.shape() != p.what.shape() {
        return Err(Error::shape_mismatch(grad_what.shape(), p.what.shape()));
    }
    let switch = match &p.where_map {
        WhereMap::Hard(sw) => sw,
        _ => return Err(Error::invalid("hard_pool_backward on a soft PoolOutput")),
    };
    let s = p.size;
    let (h, w) = (ho * s, wo * s);
    let mut grad_x = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let base = plane * ho * wo;
        let dst = &mut grad_x.data_mut()[plane * h * w..(plane + 1) * h * w];
        for ry in 0..ho {
            for rx in 0..wo {
                let idx = switch_index(switch.data()[base + ry * wo + rx], s)?;
                let (dy, dx) = (idx / s, idx % s);
                dst[(ry * s + dy) * w + rx * s + dx] = grad_what.data()[base + ry * wo + rx];
            }
        }
    }
    Ok(grad_x)
}

fn switch_index(raw: f64, s: usize) -> Result<usize> {
    let idx = raw as usize;
    if raw.fract() != 0.0 || raw < 0.0 || idx >= s * s {
        return Err(Error::invalid(format!(
            "switch index {raw} invalid for pool size {s}"
        )));
    }
    Ok(idx)
}

/// Zero-filled s x-larger tensor with each region's what placed at its
/// switch position.
pub fn hard_unpool(p: &PoolOutput) -> Result<Tensor> {
    let (n, c, ho, wo) = check_pool_output(p)?;
    let switch = match &p.where_map {
        WhereMap::Hard(sw) => sw,
        _ => return Err(Error::invalid("hard_unpool on a soft PoolOutput")),
    };
    let s = p.size;
    let (h, w) = (ho * s, wo * s);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let base = plane * ho * wo;
        let dst = &mut out.data_mut()[plane * h * w..(plane + 1) * h * w];
        for ry in 0..ho {
            for rx in 0..wo {
                let idx = switch_index(switch.data()[base + ry * wo + rx], s)?;
                let (dy, dx) = (idx / s, idx % s);
                dst[(ry * s + dy) * w + rx * s + dx] = p.what.data()[base + ry * wo + rx];
            }
        }
    }
    Ok(out)
}

/// Gradient of [`hard_unpool`] with respect to the what: read the output
/// gradient at each switch position.
pub fn hard_unpool_backward(p: &PoolOutput, grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, ho, wo) = check_pool_output(p)?;
    let switch = match &p.where_map {
        WhereMap::Hard(sw) => sw,
        _ => return Err(Error::invalid("hard_unpool_backward on a soft PoolOutput")),
    };
    let s = p.size;
    let (h, w) = (ho * s, wo * s);
    let expect = [n, c, h, w];
    if grad_out.shape() != expect {
        return Err(Error::shape_mismatch(grad_out.shape(), &expect));
    }
    let mut grad_what = Tensor::zeros(&[n, c, ho, wo]);
    for plane in 0..n * c {
        let base = plane * ho * wo;
        let src = &grad_out.data()[plane * h * w..(plane + 1) * h * w];
        for ry in 0..ho {
            for rx in 0..wo {
                let idx = switch_index(switch.data()[base + ry * wo + rx], s)?;
                let (dy, dx) = (idx / s, idx % s);
                grad_what.data_mut()[base + ry * wo + rx] = src[(ry * s + dy) * w + rx * s + dx];
            }
        }
    }
    Ok(grad_what)
}

/// Soft pooling: per region, weights `w = softmax(beta * z)` give
/// `what = sum w*z` and a weighted centroid of the normalized cell
/// coordinates. Log-sum-exp keeps large `beta * z` finite. At `beta = 0`
/// this is mean pooling with a centered where; as `beta` grows it
/// approaches hard max pooling.
pub fn soft_pool(x: &Tensor, s: usize, beta: f64) -> Result<PoolOutput> {
    let (n, c, h, w) = check_pool_input(x, s)?;
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::invalid(format!(
            "soft pooling needs finite beta >= 0, got {beta}"
        )));
    }
    let (ho, wo) = (h / s, w / s);
    let mut what = Tensor::zeros(&[n, c, ho, wo]);
    let mut px = Tensor::zeros(&[n, c, ho, wo]);
    let mut py = Tensor::zeros(&[n, c, ho, wo]);
    let mut weights = vec![0.0; s * s];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let base = plane * ho * wo;
        for ry in 0..ho {
            for rx in 0..wo {
                region_weights(src, w, s, ry, rx, beta, &mut weights);
                let (mut m, mut cx, mut cy) = (0.0, 0.0, 0.0);
                for dy in 0..s {
                    for dx in 0..s {
                        let wt = weights[dy * s + dx];
                        m += wt * src[(ry * s + dy) * w + rx * s + dx];
                        cx += wt * cell_coord(dx, s);
                        cy += wt * cell_coord(dy, s);
                    }
                }
                what.data_mut()[base + ry * wo + rx] = m;
                // convex combinations of [-1,1]; clamp off float dust so
                // downstream unpooling never sees 1+2^-52
                px.data_mut()[base + ry * wo + rx] = cx.clamp(-1.0, 1.0);
                py.data_mut()[base + ry * wo + rx] = cy.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(PoolOutput {
        what,
        where_map: WhereMap::Soft { x: px, y: py },
        size: s,
    })
}

fn region_weights(src: &[f64], w: usize, s: usize, ry: usize, rx: usize, beta: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for dy in 0..s {
        for dx in 0..s {
            let t = beta * src[(ry * s + dy) * w + rx * s + dx];
            out[dy * s + dx] = t;
            if t > max {
                max = t;
            }
        }
    }
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in out.iter_mut() {
        *v *= inv;
    }
}

/// Exact gradient of [`soft_pool`] with respect to the input, given
/// gradients on all three outputs. `x` must be the tensor passed to the
/// matching forward (weights are recomputed from it).
pub fn soft_pool_backward(
    x: &Tensor,
    s: usize,
    beta: f64,
    p: &PoolOutput,
    grad_what: &Tensor,
    grad_px: &Tensor,
    grad_py: &Tensor,
) -> Result<Tensor> {
    let (n, c, h, w) = check_pool_input(x, s)?;
    let (ho, wo) = (h / s, w / s);
    let expect = [n, c, ho, wo];
    for g in [grad_what, grad_px, grad_py] {
        if g.shape() != expect {
            return Err(Error::shape_mismatch(g.shape(), &expect));
        }
    }
    let (px, py) = match &p.where_map {
        WhereMap::Soft { x, y } => (x, y),
        _ => return Err(Error::invalid("soft_pool_backward on a hard PoolOutput")),
    };
    let mut grad_x = Tensor::zeros_like(x);
    let mut weights = vec![0.0; s * s];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut grad_x.data_mut()[plane * h * w..(plane + 1) * h * w];
        let base = plane * ho * wo;
        for ry in 0..ho {
            for rx in 0..wo {
                region_weights(src, w, s, ry, rx, beta, &mut weights);
                let at = base + ry * wo + rx;
                let (m, cx, cy) = (p.what.data()[at], px.data()[at], py.data()[at]);
                let (gm, gx, gy) = (grad_what.data()[at], grad_px.data()[at], grad_py.data()[at]);
                for dy in 0..s {
                    for dx in 0..s {
                        let wt = weights[dy * s + dx];
                        let z = src[(ry * s + dy) * w + rx * s + dx];
                        // d what/dz = w + beta*w*(z - m); d p/dz = beta*w*(coord - p)
                        let g = gm * (wt + beta * wt * (z - m))
                            + gx * beta * wt * (cell_coord(dx, s) - cx)
                            + gy * beta * wt * (cell_coord(dy, s) - cy);
                        dst[(ry * s + dy) * w + rx * s + dx] = g;
                    }
                }
            }
        }
    }
    Ok(grad_x)
}

/// How a soft where coordinate lands on the cell grid: base cell index and
/// the fractional offset toward the next cell.
fn grid_place(coord: f64, s: usize) -> (usize, f64) {
    debug_assert!(s >= 2);
    let u = (coord + 1.0) * (s - 1) as f64 / 2.0;
    let c0 = (u.floor() as usize).min(s - 2);
    (c0, u - c0 as f64)
}

/// Spread each region's what over the (at most) four cells nearest its
/// where, with bilinear weights that sum to one.
pub fn soft_unpool(p: &PoolOutput) -> Result<Tensor> {
    let (n, c, ho, wo) = check_pool_output(p)?;
    let (px, py) = match &p.where_map {
        WhereMap::Soft { x, y } => (x, y),
        _ => return Err(Error::invalid("soft_unpool on a hard PoolOutput")),
    };
    let s = p.size;
    let (h, w) = (ho * s, wo * s);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let base = plane * ho * wo;
        let dst = &mut out.data_mut()[plane * h * w..(plane + 1) * h * w];
        for ry in 0..ho {
            for rx in 0..wo {
                let at = base + ry * wo + rx;
                let m = p.what.data()[at];
                let (cx, cy) = (px.data()[at], py.data()[at]);
                for coord in [cx, cy] {
                    if !(-1.0..=1.0).contains(&coord) {
                        return Err(Error::invalid(format!(
                            "soft where coordinate {coord} outside [-1, 1]"
                        )));
                    }
                }
                if s == 1 {
                    dst[ry * w + rx] = m;
                    continue;
                }
                let (c0, fu) = grid_place(cx, s);
                let (r0, fv) = grid_place(cy, s);
                dst[(ry * s + r0) * w + rx * s + c0] += m * (1.0 - fv) * (1.0 - fu);
                dst[(ry * s + r0) * w + rx * s + c0 + 1] += m * (1.0 - fv) * fu;
                dst[(ry * s + r0 + 1) * w + rx * s + c0] += m * fv * (1.0 - fu);
                dst[(ry * s + r0 + 1) * w + rx * s + c0 + 1] += m * fv * fu;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`soft_unpool`] with respect to what and both where
/// coordinates (in that order).
pub fn soft_unpool_backward(
    p: &PoolOutput,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, ho, wo) = check_pool_output(p)?;
    let (px, py) = match &p.where_map {
        WhereMap::Soft { x, y } => (x, y),
        _ => return Err(Error::invalid("soft_unpool_backward on a hard PoolOutput")),
    };
    let s = p.size;
    let (h, w) = (ho * s, wo * s);
    let expect = [n, c, h, w];
    if grad_out.shape() != expect {
        return Err(Error::shape_mismatch(grad_out.shape(), &expect));
    }
    let mut grad_what = Tensor::zeros(&[n, c, ho, wo]);
    let mut grad_px = Tensor::zeros(&[n, c, ho, wo]);
    let mut grad_py = Tensor::zeros(&[n, c, ho, wo]);
    let half = (s - 1) as f64 / 2.0;
    for plane in 0..n * c {
        let base = plane * ho * wo;
        let src = &grad_out.data()[plane * h * w..(plane + 1) * h * w];
        for ry in 0..ho {
            for rx in 0..wo {
                let at = base + ry * wo + rx;
                if s == 1 {
                    grad_what.data_mut()[at] = src[ry * w + rx];
                    continue;
                }
                let m = p.what.data()[at];
                let (c0, fu) = grid_place(px.data()[at], s);
                let (r0, fv) = grid_place(py.data()[at], s);
                let g00 = src[(ry * s + r0) * w + rx * s + c0];
                let g01 = src[(ry * s + r0) * w + rx * s + c0 + 1];
                let g10 = src[(ry * s + r0 + 1) * w + rx * s + c0];
                let g11 = src[(ry * s + r0 + 1) * w + rx * s + c0 + 1];
                grad_what.data_mut()[at] = (1.0 - fv) * ((1.0 - fu) * g00 + fu * g01)
                    + fv * ((1.0 - fu) * g10 + fu * g11);
                grad_px.data_mut()[at] =
                    m * ((1.0 - fv) * (g01 - g00) + fv * (g11 - g10)) * half;
                grad_py.data_mut()[at] =
                    m * ((1.0 - fu) * (g10 - g00) + fu * (g11 - g01)) * half;
            }
        }
    }
    Ok((grad_what, grad_px, grad_py))
}

/// Copy each value over its whole s x s region -- unpooling without a
/// where.
pub fn upsample(what: &Tensor, s: usize) -> Result<Tensor> {
    if what.rank() != 4 {
        return Err(Error::invalid(format!(
            "upsample expects rank 4, got {:?}",
            what.shape()
        )));
    }
    if s == 0 {
        return Err(Error::invalid("pool size must be positive"));
    }
    let (n, c, ho, wo) = (
        what.shape()[0],
        what.shape()[1],
        what.shape()[2],
        what.shape()[3],
    );
    let (h, w) = (ho * s, wo * s);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let src = &what.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut out.data_mut()[plane * h * w..(plane + 1) * h * w];
        for ry in 0..ho {
            for rx in 0..wo {
                let v = src[ry * wo + rx];
                for dy in 0..s {
                    for dx in 0..s {
                        dst[(ry * s + dy) * w + rx * s + dx] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`upsample`]: sum the output gradient over each region.
pub fn upsample_backward(grad_out: &Tensor, s: usize) -> Result<Tensor> {
    if grad_out.rank() != 4 {
        return Err(Error::invalid(format!(
            "upsample_backward expects rank 4, got {:?}",
            grad_out.shape()
        )));
    }
    if s == 0 {
        return Err(Error::invalid("pool size must be positive"));
    }
    let (n, c, h, w) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    );
    if h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!(
            "gradient extents {h}x{w} not divisible by pool size {s}"
        )));
    }
    let (ho, wo) = (h / s, w / s);
    let mut grad = Tensor::zeros(&[n, c, ho, wo]);
    for plane in 0..n * c {
        let src = &grad_out.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut grad.data_mut()[plane * ho * wo..(plane + 1) * ho * wo];
        for ry in 0..ho {
            for rx in 0..wo {
                let mut acc = 0.0;
                for dy in 0..s {
                    for dx in 0..s {
                        acc += src[(ry * s + dy) * w + rx * s + dx];
                    }
                }
                dst[ry * wo + rx] = acc;
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, uniform_fill};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 93);
        let mut t = Tensor::zeros(shape);
        uniform_fill(t.data_mut(), -1.0, 1.0, &mut r);
        t
    }

    /// Independent per-region scan: max and first index attaining it.
    fn brute_force_hard(x: &Tensor, s: usize) -> (Tensor, Tensor) {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (h / s, w / s);
        let mut what = Tensor::zeros(&[n, c, ho, wo]);
        let mut sw = Tensor::zeros(&[n, c, ho, wo]);
        for img in 0..n {
            for ch in 0..c {
                for ry in 0..ho {
                    for rx in 0..wo {
                        let mut cells = Vec::new();
                        for dy in 0..s {
                            for dx in 0..s {
                                cells.push(x.at4(img, ch, ry * s + dy, rx * s + dx));
                            }
                        }
                        let best = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let arg = cells.iter().position(|&v| v == best).unwrap();
                        what.set4(img, ch, ry, rx, best);
                        sw.set4(img, ch, ry, rx, arg as f64);
                    }
                }
            }
        }
        (what, sw)
    }

    #[test]
    fn hard_pool_definition() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 0.0, 0.0, 5.0]).unwrap();
        let p = hard_pool(&x, 2).unwrap();
        assert_eq!(p.what.data(), &[5.0]);
        match &p.where_map {
            WhereMap::Hard(sw) => assert_eq!(sw.data(), &[3.0]),
            _ => panic!("expected hard where"),
        }
    }

    #[test]
    fn hard_pool_tie_breaks_to_smallest_index() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![7.0, 7.0, 7.0, 7.0]).unwrap();
        let p = hard_pool(&x, 2).unwrap();
        match &p.where_map {
            WhereMap::Hard(sw) => assert_eq!(sw.data(), &[0.0]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn hard_pool_size_one_is_identity() {
        let x = random(&[1, 2, 3, 3], 1);
        let p = hard_pool(&x, 1).unwrap();
        assert_eq!(p.what, x);
        match &p.where_map {
            WhereMap::Hard(sw) => assert!(sw.data().iter().all(|&v| v == 0.0)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn hard_pool_matches_brute_force_scan() {
        let x = random(&[2, 3, 8, 8], 2);
        for s in [2usize, 4, 8] {
            let p = hard_pool(&x, s).unwrap();
            let (what, sw) = brute_force_hard(&x, s);
            assert_eq!(p.what, what, "s={s}");
            match &p.where_map {
                WhereMap::Hard(got) => assert_eq!(got, &sw, "s={s}"),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn hard_pool_rejects_non_divisible() {
        let x = Tensor::zeros(&[1, 1, 6, 6]);
        assert!(hard_pool(&x, 4).is_err());
        assert!(hard_pool(&x, 0).is_err());
    }

    #[test]
    fn hard_backward_routes_to_switch() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 4.0, 2.0, 3.0]).unwrap();
        let p = hard_pool(&x, 2).unwrap();
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![10.0]).unwrap();
        let gx = hard_pool_backward(&p, &g).unwrap();
        assert_eq!(gx.data(), &[0.0, 10.0, 0.0, 0.0]);
    }

    #[test]
    fn hard_unpool_places_what_at_switch() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 4.0, 2.0, 3.0]).unwrap();
        let p = hard_pool(&x, 2).unwrap();
        let u = hard_unpool(&p).unwrap();
        assert_eq!(u.data(), &[0.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn hard_unpool_rejects_corrupt_switch() {
        let p = PoolOutput {
            what: Tensor::zeros(&[1, 1, 1, 1]),
            where_map: WhereMap::Hard(Tensor::from_vec(&[1, 1, 1, 1], vec![4.0]).unwrap()),
            size: 2,
        };
        assert!(hard_unpool(&p).is_err());
        let p = PoolOutput {
            what: Tensor::zeros(&[1, 1, 1, 1]),
            where_map: WhereMap::Hard(Tensor::from_vec(&[1, 1, 1, 1], vec![1.5]).unwrap()),
            size: 2,
        };
        assert!(hard_unpool(&p).is_err());
    }

    #[test]
    fn hard_roundtrip_is_idempotent_for_positive_what() {
        let mut x = random(&[2, 2, 8, 8], 3);
        for v in x.data_mut() {
            *v = v.abs() + 0.1;
        }
        for s in [2usize, 4] {
            let p = hard_pool(&x, s).unwrap();
            let again = hard_pool(&hard_unpool(&p).unwrap(), s).unwrap();
            assert_eq!(again, p, "s={s}");
        }
    }

    #[test]
    fn hard_unpool_backward_reads_switch_position() {
        let x = random(&[1, 2, 4, 4], 4);
        let p = hard_pool(&x, 2).unwrap();
        let gout = random(&[1, 2, 4, 4], 5);
        let gw = hard_unpool_backward(&p, &gout).unwrap();
        // independently: the grad at each argmax position
        match &p.where_map {
            WhereMap::Hard(sw) => {
                for ch in 0..2 {
                    for ry in 0..2 {
                        for rx in 0..2 {
                            let idx = sw.at4(0, ch, ry, rx) as usize;
                            let (dy, dx) = (idx / 2, idx % 2);
                            let want = gout.at4(0, ch, ry * 2 + dy, rx * 2 + dx);
                            assert_eq!(gw.at4(0, ch, ry, rx), want);
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn cell_coord_endpoints() {
        assert_eq!(cell_coord(0, 1), 0.0);
        assert_eq!(cell_coord(0, 4), -1.0);
        assert_eq!(cell_coord(3, 4), 1.0);
        assert_eq!(cell_coord(1, 3), 0.0);
    }

    #[test]
    fn soft_pool_beta_zero_is_mean_with_centered_where() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let p = soft_pool(&x, 2, 0.0).unwrap();
        assert!((p.what.data()[0] - 4.0).abs() <= 1e-12);
        match &p.where_map {
            WhereMap::Soft { x, y } => {
                assert!(x.data()[0].abs() <= 1e-12);
                assert!(y.data()[0].abs() <= 1e-12);
            }
            _ => unreachable!(),
        }
        // any region content keeps the where centered at beta = 0
        let r = random(&[2, 2, 8, 8], 6);
        let p = soft_pool(&r, 4, 0.0).unwrap();
        let mean = |t: &Tensor| -> Tensor {
            let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
            let mut out = Tensor::zeros(&[n, c, h / 4, w / 4]);
            for img in 0..n {
                for ch in 0..c {
                    for ry in 0..h / 4 {
                        for rx in 0..w / 4 {
                            let mut s = 0.0;
                            for dy in 0..4 {
                                for dx in 0..4 {
                                    s += t.at4(img, ch, ry * 4 + dy, rx * 4 + dx);
                                }
                            }
                            out.set4(img, ch, ry, rx, s / 16.0);
                        }
                    }
                }
            }
            out
        };
        assert!(p.what.allclose(&mean(&r), 0.0, 1e-12).unwrap());
        match &p.where_map {
            WhereMap::Soft { x, y } => {
                assert!(x.data().iter().all(|v| v.abs() <= 1e-12));
                assert!(y.data().iter().all(|v| v.abs() <= 1e-12));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn soft_pool_saturates_to_max_at_huge_beta() {
        // unique max at the bottom-right corner
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.9]).unwrap();
        let p = soft_pool(&x, 2, 1e6).unwrap();
        assert!((p.what.data()[0] - 0.9).abs() < 1e-6);
        match &p.where_map {
            WhereMap::Soft { x, y } => {
                assert!((x.data()[0] - 1.0).abs() < 1e-6);
                assert!((y.data()[0] - 1.0).abs() < 1e-6);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn soft_pool_beta_one_matches_direct_formula() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = soft_pool(&x, 2, 1.0).unwrap();
        // direct evaluation: w_i = e^{z_i} / sum, coords (-1,1) per axis
        let e: Vec<f64> = [0.0f64, 1.0, 2.0, 3.0].iter().map(|z| z.exp()).collect();
        let z_sum: f64 = e.iter().sum();
        let m = (0.0 * e[0] + 1.0 * e[1] + 2.0 * e[2] + 3.0 * e[3]) / z_sum;
        let px = (-e[0] + e[1] - e[2] + e[3]) / z_sum;
        let py = (-e[0] - e[1] + e[2] + e[3]) / z_sum;
        assert!((p.what.data()[0] - m).abs() <= 1e-12);
        match &p.where_map {
            WhereMap::Soft { x, y } => {
                assert!((x.data()[0] - px).abs() <= 1e-12);
                assert!((y.data()[0] - py).abs() <= 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn soft_pool_approaches_hard_pool_at_large_beta() {
        let x = random(&[2, 2, 8, 8], 7);
        for s in [2usize, 4] {
            let hard = hard_pool(&x, s).unwrap();
            let soft = soft_pool(&x, s, 1e4).unwrap();
            assert!(soft.what.allclose(&hard.what, 0.0, 1e-3).unwrap());
            let (sx, sy) = match &soft.where_map {
                WhereMap::Soft { x, y } => (x, y),
                _ => unreachable!(),
            };
            let sw = match &hard.where_map {
                WhereMap::Hard(sw) => sw,
                _ => unreachable!(),
            };
            for i in 0..sw.len() {
                let idx = sw.data()[i] as usize;
                let want_x = cell_coord(idx % s, s);
                let want_y = cell_coord(idx / s, s);
                assert!((sx.data()[i] - want_x).abs() < 1e-3);
                assert!((sy.data()[i] - want_y).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn soft_what_is_monotone_in_beta() {
        let x = random(&[1, 1, 4, 4], 8);
        let betas = [0.0, 0.5, 1.0, 2.0, 5.0, 20.0, 100.0];
        let mut prev: Option<Tensor> = None;
        for &b in &betas {
            let p = soft_pool(&x, 2, b).unwrap();
            if let Some(last) = &prev {
                for (now, old) in p.what.data().iter().zip(last.data()) {
                    assert!(now >= &(old - 1e-12), "beta {b}: {now} < {old}");
                }
            }
            prev = Some(p.what);
        }
    }

    #[test]
    fn soft_pool_rejects_negative_beta() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(soft_pool(&x, 2, -1.0).is_err());
        assert!(PoolMode::soft(-0.5).is_err());
        assert!(PoolMode::soft(f64::NAN).is_err());
    }

    #[test]
    fn soft_pool_backward_matches_finite_differences() {
        let x = random(&[1, 2, 4, 4], 9);
        let (s, beta) = (2usize, 3.0);
        let p = soft_pool(&x, s, beta).unwrap();
        let gw = random(&[1, 2, 2, 2], 10);
        let gx_c = random(&[1, 2, 2, 2], 11);
        let gy_c = random(&[1, 2, 2, 2], 12);
        let gx = soft_pool_backward(&x, s, beta, &p, &gw, &gx_c, &gy_c).unwrap();

        let score = |x: &Tensor| -> f64 {
            let p = soft_pool(x, s, beta).unwrap();
            let (px, py) = match &p.where_map {
                WhereMap::Soft { x, y } => (x.clone(), y.clone()),
                _ => unreachable!(),
            };
            let mut acc = 0.0;
            for i in 0..p.what.len() {
                acc += p.what.data()[i] * gw.data()[i]
                    + px.data()[i] * gx_c.data()[i]
                    + py.data()[i] * gy_c.data()[i];
            }
            acc
        };
        let eps = 1e-5;
        for idx in 0..x.len() {
            let mut pl = x.clone();
            pl.data_mut()[idx] += eps;
            let mut mi = x.clone();
            mi.data_mut()[idx] -= eps;
            let num = (score(&pl) - score(&mi)) / (2.0 * eps);
            let ana = gx.data()[idx];
            assert!(
                (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8) < 1e-4,
                "idx {idx}: {ana} vs {num}"
            );
        }
    }

    #[test]
    fn soft_unpool_at_cell_center_is_a_point_mass() {
        let p = PoolOutput {
            what: Tensor::from_vec(&[1, 1, 1, 1], vec![6.0]).unwrap(),
            where_map: WhereMap::Soft {
                x: Tensor::from_vec(&[1, 1, 1, 1], vec![cell_coord(1, 3)]).unwrap(),
                y: Tensor::from_vec(&[1, 1, 1, 1], vec![cell_coord(2, 3)]).unwrap(),
            },
            size: 3,
        };
        let u = soft_unpool(&p).unwrap();
        assert_eq!(u.at4(0, 0, 2, 1), 6.0);
        assert_eq!(u.sum(), 6.0);
    }

    #[test]
    fn soft_unpool_center_of_even_grid_splits_equally() {
        let p = PoolOutput {
            what: Tensor::from_vec(&[1, 1, 1, 1], vec![8.0]).unwrap(),
            where_map: WhereMap::Soft {
                x: Tensor::zeros(&[1, 1, 1, 1]),
                y: Tensor::zeros(&[1, 1, 1, 1]),
            },
            size: 2,
        };
        let u = soft_unpool(&p).unwrap();
        for &v in u.data() {
            assert!((v - 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn soft_unpool_conserves_mass() {
        let x = random(&[2, 2, 8, 8], 13);
        let p = soft_pool(&x, 4, 2.0).unwrap();
        let u = soft_unpool(&p).unwrap();
        // per-region sum equals the region's what
        for img in 0..2 {
            for ch in 0..2 {
                for ry in 0..2 {
                    for rx in 0..2 {
                        let mut s = 0.0;
                        for dy in 0..4 {
                            for dx in 0..4 {
                                s += u.at4(img, ch, ry * 4 + dy, rx * 4 + dx);
                            }
                        }
                        let m = p.what.at4(img, ch, ry, rx);
                        assert!((s - m).abs() <= 1e-12, "{s} vs {m}");
                    }
                }
            }
        }
    }

    #[test]
    fn soft_unpool_rejects_out_of_range_coordinate() {
        let p = PoolOutput {
            what: Tensor::zeros(&[1, 1, 1, 1]),
            where_map: WhereMap::Soft {
                x: Tensor::from_vec(&[1, 1, 1, 1], vec![1.5]).unwrap(),
                y: Tensor::zeros(&[1, 1, 1, 1]),
            },
            size: 2,
        };
        assert!(soft_unpool(&p).is_err());
    }

    #[test]
    fn soft_unpool_backward_matches_finite_differences() {
        // build a soft PoolOutput off cell centers so bilinear is smooth
        let x = random(&[1, 2, 4, 4], 14);
        let p = soft_pool(&x, 2, 3.0).unwrap();
        let gout = random(&[1, 2, 4, 4], 15);
        let (gm, gpx, gpy) = soft_unpool_backward(&p, &gout).unwrap();

        let score = |p: &PoolOutput| -> f64 {
            soft_unpool(p)
                .unwrap()
                .data()
                .iter()
                .zip(gout.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-5;
        for idx in 0..p.what.len() {
            // what path
            let mut pp = p.clone();
            pp.what.data_mut()[idx] += eps;
            let mut pm = p.clone();
            pm.what.data_mut()[idx] -= eps;
            let num = (score(&pp) - score(&pm)) / (2.0 * eps);
            let ana = gm.data()[idx];
            assert!(
                (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8) < 1e-4,
                "what[{idx}]: {ana} vs {num}"
            );
            // where paths
            for (axis, ana) in [(0, gpx.data()[idx]), (1, gpy.data()[idx])] {
                let bump = |p: &PoolOutput, d: f64| -> PoolOutput {
                    let mut q = p.clone();
                    if let WhereMap::Soft { x, y } = &mut q.where_map {
                        let t = if axis == 0 { x } else { y };
                        t.data_mut()[idx] += d;
                    }
                    q
                };
                let num = (score(&bump(&p, eps)) - score(&bump(&p, -eps))) / (2.0 * eps);
                assert!(
                    (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8) < 1e-4,
                    "where{axis}[{idx}]: {ana} vs {num}"
                );
            }
        }
    }

    #[test]
    fn upsample_definition() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let u = upsample(&x, 2).unwrap();
        assert_eq!(u.shape(), &[1, 1, 2, 2]);
        assert_eq!(u.data(), &[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(upsample(&x, 1).unwrap(), x);
    }

    #[test]
    fn upsample_scales_total_mass_by_s_squared() {
        let x = random(&[2, 3, 4, 4], 16);
        let u = upsample(&x, 3).unwrap();
        assert!((u.sum() - 9.0 * x.sum()).abs() < 1e-9);
    }

    #[test]
    fn upsample_backward_sums_regions() {
        let x = random(&[1, 1, 2, 2], 17);
        let gout = random(&[1, 1, 4, 4], 18);
        let g = upsample_backward(&gout, 2).unwrap();
        for ry in 0..2 {
            for rx in 0..2 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += gout.at4(0, 0, ry * 2 + dy, rx * 2 + dx);
                    }
                }
                assert!((g.at4(0, 0, ry, rx) - s).abs() < 1e-12);
            }
        }
        // adjoint identity: <upsample(x), g> == <x, upsample_backward(g)>
        let lhs: f64 = upsample(&x, 2)
            .unwrap()
            .data()
            .iter()
            .zip(gout.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
