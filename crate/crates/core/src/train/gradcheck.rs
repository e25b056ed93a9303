//! Central-finite-difference gradient verification, plus the standard
//! battery covering every layer type and the assembled model.

use crate::archdsl::parse_architecture;
use crate::error::{Error, Result};
use crate::nn::{
    l1_penalty, l2_loss, relu, relu_backward, softmax_nll, BatchNorm, ConvLayer, Dropout, FcLayer,
    Mode,
};
use crate::pooling::{
    hard_pool, hard_pool_backward, hard_unpool, hard_unpool_backward, soft_pool,
    soft_pool_backward, soft_unpool, soft_unpool_backward, PoolMode, PoolOutput, WhereMap,
};
use crate::rng::{self, uniform_fill, STREAM_GRADCHECK};
use crate::swwae::{SwwaeConfig, SwwaeModel};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compare `analytic` against central differences of `loss` around
/// `theta`: `(L(t+eps) - L(t-eps)) / 2eps` per coordinate, relative error
/// `|a-n| / max(|a|, |n|, 1e-8)`. Checks all coordinates when there are
/// at most 200, otherwise a seeded sample of 200.
pub fn gradient_check(
    name: &str,
    theta: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<GradReport> {
    if theta.len() != analytic.len() {
        return Err(Error::invalid(format!(
            "{name}: {} parameters but {} gradient entries",
            theta.len(),
            analytic.len()
        )));
    }
    if theta.is_empty() {
        return Err(Error::invalid(format!("{name}: nothing to check")));
    }
    let coords: Vec<usize> = if theta.len() <= 200 {
        (0..theta.len()).collect()
    } else {
        let mut r = rng::stream(seed, STREAM_GRADCHECK);
        sample(&mut r, theta.len(), 200).into_vec()
    };
    let mut report = GradReport {
        name: name.to_string(),
        coords_checked: coords.len(),
        max_rel_error: 0.0,
        worst_coordinate: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tol,
    };
    let mut probe = theta.to_vec();
    for &i in &coords {
        probe[i] = theta[i] + eps;
        let up = loss(&probe)?;
        probe[i] = theta[i] - eps;
        let down = loss(&probe)?;
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::invalid(format!(
                "{name}: non-finite loss at coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    uniform_fill(t.data_mut(), lo, hi, rng);
    t
}

/// Uniform draws kept away from zero, for kinked functions (ReLU, L1).
fn off_kink_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let mag: f64 = rng.gen_range(0.1..1.0);
        *v = if rng.gen_bool(0.5) { mag } else { -mag };
    }
    t
}

fn apply_fault(analytic: &mut [f64], name: &str, fault: Option<&str>) {
    if fault == Some(name) {
        for g in analytic.iter_mut() {
            *g *= 1.01;
        }
    }
}

fn split3(theta: &[f64], a: usize, b: usize) -> (&[f64], &[f64], &[f64]) {
    (&theta[..a], &theta[a..a + b], &theta[a + b..])
}

fn check_fc(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed, STREAM_GRADCHECK);
    let mut fc = FcLayer::new(6, 4, &mut r)?;
    let x = rand_tensor(&[3, 6], -1.0, 1.0, &mut r);
    let target = rand_tensor(&[3, 4], -1.0, 1.0, &mut r);
    let (nw, nb) = (24, 4);

    let y = fc.forward(&x)?;
    let grad_out = l2_loss(&y, &target)?.1;
    fc.weight.zero_grad();
    fc.bias.zero_grad();
    let gin = fc.backward(&x, &grad_out)?;
    let mut analytic = Vec::new();
    analytic.extend_from_slice(fc.weight.grad.data());
    analytic.extend_from_slice(fc.bias.grad.data());
    analytic.extend_from_slice(gin.data());
    apply_fault(&mut analytic, "fc", fault);

    let mut theta = Vec::new();
    theta.extend_from_slice(fc.weight.value.data());
    theta.extend_from_slice(fc.bias.value.data());
    theta.extend_from_slice(x.data());

    let loss = |t: &[f64]| -> Result<f64> {
        let (w, b, xv) = split3(t, nw, nb);
        let mut fc2 = FcLayer::new(6, 4, &mut rng::stream(seed, STREAM_GRADCHECK))?;
        fc2.weight.value.data_mut().copy_from_slice(w);
        fc2.bias.value.data_mut().copy_from_slice(b);
        let xt = Tensor::from_vec(&[3, 6], xv.to_vec())?;
        Ok(l2_loss(&fc2.forward(&xt)?, &target)?.0)
    };
    gradient_check("fc", &theta, &analytic, loss, EPS, TOL, seed)
}

fn check_conv(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed.wrapping_add(1), STREAM_GRADCHECK);
    let mut conv = ConvLayer::new(2, 3, 3, &mut r)?;
    let x = rand_tensor(&[2, 2, 5, 5], -1.0, 1.0, &mut r);
    let target = rand_tensor(&[2, 3, 5, 5], -1.0, 1.0, &mut r);
    let (nw, nb) = (conv.weight.value.len(), 3);

    let y = conv.forward(&x)?;
    let grad_out = l2_loss(&y, &target)?.1;
    conv.weight.zero_grad();
    conv.bias.zero_grad();
    let gin = conv.backward(&x, &grad_out)?;
    let mut analytic = Vec::new();
    analytic.extend_from_slice(conv.weight.grad.data());
    analytic.extend_from_slice(conv.bias.grad.data());
    analytic.extend_from_slice(gin.data());
    apply_fault(&mut analytic, "conv", fault);

    let mut theta = Vec::new();
    theta.extend_from_slice(conv.weight.value.data());
    theta.extend_from_slice(conv.bias.value.data());
    theta.extend_from_slice(x.data());

    let loss = |t: &[f64]| -> Result<f64> {
        let (w, b, xv) = split3(t, nw, nb);
        let mut c2 = ConvLayer::new(2, 3, 3, &mut rng::stream(seed, STREAM_GRADCHECK))?;
        c2.weight.value.data_mut().copy_from_slice(w);
        c2.bias.value.data_mut().copy_from_slice(b);
        let xt = Tensor::from_vec(&[2, 2, 5, 5], xv.to_vec())?;
        Ok(l2_loss(&c2.forward(&xt)?, &target)?.0)
    };
    gradient_check("conv", &theta, &analytic, loss, EPS, TOL, seed)
}

fn check_relu(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed.wrapping_add(2), STREAM_GRADCHECK);
    let x = off_kink_tensor(&[5, 8], &mut r);
    let target = rand_tensor(&[5, 8], -1.0, 1.0, &mut r);
    let grad_out = l2_loss(&relu(&x), &target)?.1;
    let mut analytic = relu_backward(&x, &grad_out).into_data();
    apply_fault(&mut analytic, "relu", fault);
    let shape = x.shape().to_vec();
    let loss = |t: &[f64]| -> Result<f64> {
        let xt = Tensor::from_vec(&shape, t.to_vec())?;
        Ok(l2_loss(&relu(&xt), &target)?.0)
    };
    gradient_check("relu", x.data(), &analytic, loss, EPS, TOL, seed)
}

fn check_batchnorm(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed.wrapping_add(3), STREAM_GRADCHECK);
    let mut bn = BatchNorm::new(3)?;
    // non-default affine parameters so their gradients are exercised
    uniform_fill(bn.scale.value.data_mut(), 0.5, 1.5, &mut r);
    uniform_fill(bn.shift.value.data_mut(), -0.5, 0.5, &mut r);
    let x = rand_tensor(&[4, 3, 2, 2], -1.0, 1.0, &mut r);
    let target = rand_tensor(&[4, 3, 2, 2], -1.0, 1.0, &mut r);
    let base_scale = bn.scale.value.clone();
    let base_shift = bn.shift.value.clone();

    let y = bn.forward(&x, Mode::Train)?;
    let grad_out = l2_loss(&y, &target)?.1;
    bn.scale.zero_grad();
    bn.shift.zero_grad();
    let gin = bn.backward(&grad_out)?;
    let mut analytic = Vec::new();
    analytic.extend_from_slice(bn.scale.grad.data());
    analytic.extend_from_slice(bn.shift.grad.data());
    analytic.extend_from_slice(gin.data());
    apply_fault(&mut analytic, "batchnorm", fault);

    let mut theta = Vec::new();
    theta.extend_from_slice(base_scale.data());
    theta.extend_from_slice(base_shift.data());
    theta.extend_from_slice(x.data());

    let loss = |t: &[f64]| -> Result<f64> {
        let (s, sh, xv) = split3(t, 3, 3);
        let mut bn2 = BatchNorm::new(3)?;
        bn2.scale.value.data_mut().copy_from_slice(s);
        bn2.shift.value.data_mut().copy_from_slice(sh);
        let xt = Tensor::from_vec(&[4, 3, 2, 2], xv.to_vec())?;
        Ok(l2_loss(&bn2.forward(&xt, Mode::Train)?, &target)?.0)
    };
    gradient_check("batchnorm", &theta, &analytic, loss, EPS, TOL, seed)
}

fn check_dropout(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed.wrapping_add(4), STREAM_GRADCHECK);
    let mut dropout = Dropout::new(0.4)?;
    let x = rand_tensor(&[4, 6], -1.0, 1.0, &mut r);
    let target = rand_tensor(&[4, 6], -1.0, 1.0, &mut r);
    // fix the mask once; `backward` then applies exactly that mask, which
    // is the layer as a fixed linear map (what the FD probe needs)
    dropout.forward(&x, Mode::Train, &mut r);
    let masked = dropout.backward(&x)?;
    let grad_out = l2_loss(&masked, &target)?.1;
    let mut analytic = dropout.backward(&grad_out)?.into_data();
    apply_fault(&mut analytic, "dropout", fault);
    let shape = x.shape().to_vec();
    let loss = |t: &[f64]| -> Result<f64> {
        let xt = Tensor::from_vec(&shape, t.to_vec())?;
        Ok(l2_loss(&dropout.backward(&xt)?, &target)?.0)
    };
    gradient_check("dropout", x.data(), &analytic, loss, EPS, TOL, seed)
}

fn check_l2(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed.wrapping_add(5), STREAM_GRADCHECK);
    let x = rand_tensor(&[3, 7], -2.0, 2.0, &mut r);
    let target = rand_tensor(&[3, 7], -2.0, 2.0, &mut r);
    let mut analytic = l2_loss(&x, &target)?.1.into_data();
    apply_fault(&mut analytic, "l2", fault);
    let shape = x.shape().to_vec();
    let loss = |t: &[f64]| -> Result<f64> {
        let xt = Tensor::from_vec(&shape, t.to_vec())?;
        Ok(l2_loss(&xt, &target)?.0)
    };
    gradient_check("l2", x.data(), &analytic, loss, EPS, TOL, seed)
}

fn check_nll(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed.wrapping_add(6), STREAM_GRADCHECK);
    let logits = rand_tensor(&[4, 5], -2.0, 2.0, &mut r);
    let labels = [0usize, 3, 2, 1];
    let mask = [true, true, false, true];
    let mut analytic = softmax_nll(&logits, &labels, &mask)?.1.into_data();
    apply_fault(&mut analytic, "nll", fault);
    let loss = |t: &[f64]| -> Result<f64> {
        let lt = Tensor::from_vec(&[4, 5], t.to_vec())?;
        Ok(softmax_nll(&lt, &labels, &mask)?.0)
    };
    gradient_check("nll", logits.data(), &analytic, loss, EPS, TOL, seed)
}

fn check_l1(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed.wrapping_add(7), STREAM_GRADCHECK);
    let x = off_kink_tensor(&[6, 6], &mut r);
    let weight = 0.37;
    let mut analytic = l1_penalty(&x, weight).1.into_data();
    apply_fault(&mut analytic, "l1", fault);
    let shape = x.shape().to_vec();
    let loss = |t: &[f64]| -> Result<f64> {
        let xt = Tensor::from_vec(&shape, t.to_vec())?;
        Ok(l1_penalty(&xt, weight).0)
    };
    gradient_check("l1", x.data(), &analytic, loss, EPS, TOL, seed)
}

fn check_soft_pool(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed.wrapping_add(8), STREAM_GRADCHECK);
    let beta = 3.0;
    let s = 2;
    let x = rand_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let tw = rand_tensor(&[1, 2, 2, 2], -1.0, 1.0, &mut r);
    let tx = rand_tensor(&[1, 2, 2, 2], -0.5, 0.5, &mut r);
    let ty = rand_tensor(&[1, 2, 2, 2], -0.5, 0.5, &mut r);

    let out = soft_pool(&x, s, beta)?;
    let WhereMap::Soft { x: px, y: py } = &out.where_map else {
        unreachable!("soft pool returns soft where")
    };
    let gw = l2_loss(&out.what, &tw)?.1;
    let gx = l2_loss(px, &tx)?.1;
    let gy = l2_loss(py, &ty)?.1;
    let mut analytic = soft_pool_backward(&x, s, beta, &out, &gw, &gx, &gy)?.into_data();
    apply_fault(&mut analytic, "soft_pool", fault);

    let loss = |t: &[f64]| -> Result<f64> {
        let xt = Tensor::from_vec(&[1, 2, 4, 4], t.to_vec())?;
        let o = soft_pool(&xt, s, beta)?;
        let WhereMap::Soft { x: ox, y: oy } = &o.where_map else {
            unreachable!()
        };
        Ok(l2_loss(&o.what, &tw)?.0 + l2_loss(ox, &tx)?.0 + l2_loss(oy, &ty)?.0)
    };
    gradient_check("soft_pool", x.data(), &analytic, loss, EPS, TOL, seed)
}

fn check_soft_unpool(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed.wrapping_add(9), STREAM_GRADCHECK);
    let s = 2;
    let what = rand_tensor(&[1, 2, 2, 2], -1.0, 1.0, &mut r);
    // keep coordinates off the [-1, 1] clamp so the probe stays interior
    let px = rand_tensor(&[1, 2, 2, 2], -0.9, 0.9, &mut r);
    let py = rand_tensor(&[1, 2, 2, 2], -0.9, 0.9, &mut r);
    let target = rand_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let n = what.len();

    let build = |t: &[f64]| -> Result<PoolOutput> {
        let (w, x, y) = split3(t, n, n);
        Ok(PoolOutput {
            what: Tensor::from_vec(&[1, 2, 2, 2], w.to_vec())?,
            where_map: WhereMap::Soft {
                x: Tensor::from_vec(&[1, 2, 2, 2], x.to_vec())?,
                y: Tensor::from_vec(&[1, 2, 2, 2], y.to_vec())?,
            },
            size: s,
        })
    };
    let mut theta = Vec::new();
    theta.extend_from_slice(what.data());
    theta.extend_from_slice(px.data());
    theta.extend_from_slice(py.data());

    let p = build(&theta)?;
    let up = soft_unpool(&p)?;
    let grad_out = l2_loss(&up, &target)?.1;
    let (gw, gx, gy) = soft_unpool_backward(&p, &grad_out)?;
    let mut analytic = Vec::new();
    analytic.extend_from_slice(gw.data());
    analytic.extend_from_slice(gx.data());
    analytic.extend_from_slice(gy.data());
    apply_fault(&mut analytic, "soft_unpool", fault);

    let loss = |t: &[f64]| -> Result<f64> {
        let p = build(t)?;
        Ok(l2_loss(&soft_unpool(&p)?, &target)?.0)
    };
    gradient_check("soft_unpool", &theta, &analytic, loss, EPS, TOL, seed)
}

/// Random regions redrawn until every max wins by a clear margin, so the
/// +-eps probes cannot flip an argmax.
fn unique_max_tensor(shape: &[usize], s: usize, rng: &mut ChaCha8Rng) -> Tensor {
    'redraw: loop {
        let t = rand_tensor(shape, 0.0, 1.0, rng);
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        for i in 0..n {
            for ch in 0..c {
                for ry in 0..h / s {
                    for rx in 0..w / s {
                        let mut vals = Vec::with_capacity(s * s);
                        for dy in 0..s {
                            for dx in 0..s {
                                vals.push(t.at4(i, ch, ry * s + dy, rx * s + dx));
                            }
                        }
                        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                        if vals[0] - vals[1] < 1e-3 {
                            continue 'redraw;
                        }
                    }
                }
            }
        }
        return t;
    }
}

fn check_hard_pool(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed.wrapping_add(10), STREAM_GRADCHECK);
    let s = 2;
    let x = unique_max_tensor(&[1, 2, 4, 4], s, &mut r);
    let target = rand_tensor(&[1, 2, 2, 2], -1.0, 1.0, &mut r);
    let out = hard_pool(&x, s)?;
    let grad_out = l2_loss(&out.what, &target)?.1;
    let mut analytic = hard_pool_backward(&out, &grad_out)?.into_data();
    apply_fault(&mut analytic, "hard_pool", fault);
    let loss = |t: &[f64]| -> Result<f64> {
        let xt = Tensor::from_vec(&[1, 2, 4, 4], t.to_vec())?;
        Ok(l2_loss(&hard_pool(&xt, s)?.what, &target)?.0)
    };
    gradient_check("hard_pool", x.data(), &analytic, loss, EPS, TOL, seed)
}

fn check_hard_unpool(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut r = rng::stream(seed.wrapping_add(11), STREAM_GRADCHECK);
    let s = 2;
    let source = unique_max_tensor(&[1, 2, 4, 4], s, &mut r);
    let frozen = hard_pool(&source, s)?;
    let target = rand_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let what = rand_tensor(&[1, 2, 2, 2], -1.0, 1.0, &mut r);

    let build = |t: &[f64]| -> Result<PoolOutput> {
        Ok(PoolOutput {
            what: Tensor::from_vec(&[1, 2, 2, 2], t.to_vec())?,
            where_map: frozen.where_map.clone(),
            size: s,
        })
    };
    let p = build(what.data())?;
    let grad_out = l2_loss(&hard_unpool(&p)?, &target)?.1;
    let mut analytic = hard_unpool_backward(&p, &grad_out)?.into_data();
    apply_fault(&mut analytic, "hard_unpool", fault);
    let loss = |t: &[f64]| -> Result<f64> {
        Ok(l2_loss(&hard_unpool(&build(t)?)?, &target)?.0)
    };
    gradient_check("hard_unpool", what.data(), &analytic, loss, EPS, TOL, seed)
}

fn check_full_model(name: &str, pool: PoolMode, seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let arch = parse_architecture("(4)3c-2p-(4)3c-2p-4fc")?;
    // No batchnorm here: a conv bias feeding a batchnorm has an exactly
    // zero gradient (mean subtraction cancels it), and finite differences
    // cannot certify a structural zero against f64 rounding noise. The
    // batchnorm backward has its own dedicated check above.
    let config = SwwaeConfig {
        lambda_nll: 1.0,
        lambda_l2rec: 0.7,
        lambda_l2m: 0.5,
        pool_mode: pool,
        ..SwwaeConfig::default()
    };
    let mut model = SwwaeModel::new(&arch, 1, 8, 8, config, true, seed)?;
    let mut r = rng::stream(seed.wrapping_add(12), STREAM_GRADCHECK);
    let images = rand_tensor(&[2, 1, 8, 8], 0.0, 1.0, &mut r);
    let labels = [1usize, 3];
    let mask = [true, true];

    model.zero_grads();
    let mut fwd_rng = rng::stream(seed, 0);
    let (trace, _) = model.forward(&images, Some(&labels), &mask, Mode::Train, &mut fwd_rng)?;
    model.backward(&trace)?;
    let mut analytic = model.grad_vector();
    apply_fault(&mut analytic, name, fault);
    let theta = model.param_vector();

    let loss = |t: &[f64]| -> Result<f64> {
        model.set_param_vector(t)?;
        let mut fr = rng::stream(seed, 0);
        let (_, losses) = model.forward(&images, Some(&labels), &mask, Mode::Train, &mut fr)?;
        Ok(losses.l_total)
    };
    gradient_check(name, &theta, &analytic, loss, EPS, TOL, seed)
}

/// Run every layer-level check plus the assembled model in hard and soft
/// modes. `fault` multiplies the named check's analytic gradient by 1.01
/// to prove the harness catches planted errors.
pub fn standard_battery(seed: u64, fault: Option<&str>) -> Result<Vec<GradReport>> {
    Ok(vec![
        check_fc(seed, fault)?,
        check_conv(seed, fault)?,
        check_relu(seed, fault)?,
        check_batchnorm(seed, fault)?,
        check_dropout(seed, fault)?,
        check_l2(seed, fault)?,
        check_nll(seed, fault)?,
        check_l1(seed, fault)?,
        check_soft_pool(seed, fault)?,
        check_soft_unpool(seed, fault)?,
        check_hard_pool(seed, fault)?,
        check_hard_unpool(seed, fault)?,
        check_full_model("swwae_hard", PoolMode::Hard, seed, fault)?,
        check_full_model("swwae_soft", PoolMode::Soft { beta: 3.0 }, seed, fault)?,
    ])
}
