//! Loss functions. Each returns the scalar loss together with the gradient
//! with respect to its first argument, so callers never re-derive it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean negative log-likelihood of the softmax over masked rows.
///
/// Rows where `mask` is false contribute neither loss nor gradient; with no
/// masked rows the result is `(0, zeros)` (the purely unsupervised case).
/// Log-sum-exp is computed against the row maximum for stability.
pub fn softmax_nll(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 {
        return Err(Error::invalid(format!(
            "softmax_nll expects rank-2 logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n || mask.len() != n {
        return Err(Error::invalid(format!(
            "softmax_nll: {n} rows but {} labels and {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {classes} classes (row {row})"
            )));
        }
    }
    let mut grad = Tensor::zeros_like(logits);
    let labeled = mask.iter().filter(|&&m| m).count();
    if labeled == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / labeled as f64;
    let mut loss = 0.0;
    for row in 0..n {
        if !mask[row] {
            continue;
        }
        let x = &logits.data()[row * classes..(row + 1) * classes];
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = x.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += (lse - x[labels[row]]) * inv;
        let g = &mut grad.data_mut()[row * classes..(row + 1) * classes];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (x[j] - lse).exp();
            *gv = (p - if j == labels[row] { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss, grad))
}

/// Mean squared difference `(1/N) * sum (a - b)^2` with gradient
/// `(2/N)(a - b)` in `a`. The per-element mean makes the value comparable
/// across layers of different sizes.
pub fn l2_loss(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(a.shape(), b.shape()));
    }
    let n = a.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros_like(a);
    for i in 0..a.len() {
        let d = a.data()[i] - b.data()[i];
        loss += d * d;
        grad.data_mut()[i] = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Gradient of [`l2_loss`] in its first argument, without the loss value.
pub fn l2_loss_backward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(l2_loss(a, b)?.1)
}

/// `weight * sum |x|` with subgradient `weight * sign(x)`, `sign(0) = 0`.
pub fn l1_penalty(x: &Tensor, weight: f64) -> (f64, Tensor) {
    let mut loss = 0.0;
    let mut grad = Tensor::zeros_like(x);
    for (g, &v) in grad.data_mut().iter_mut().zip(x.data()) {
        loss += v.abs();
        *g = if v > 0.0 {
            weight
        } else if v < 0.0 {
            -weight
        } else {
            0.0
        };
    }
    (weight * loss, grad)
}

/// Gradient of [`l1_penalty`] alone.
pub fn l1_penalty_backward(x: &Tensor, weight: f64) -> Tensor {
    l1_penalty(x, weight).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, uniform_fill};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 92);
        let mut t = Tensor::zeros(shape);
        uniform_fill(t.data_mut(), -1.0, 1.0, &mut r);
        t
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::zeros(&[3, 10]);
        let (loss, _) = softmax_nll(&logits, &[0, 5, 9], &[true; 3]).unwrap();
        assert!((loss - 10.0_f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn empty_mask_is_zero_loss_zero_grad() {
        let logits = random(&[4, 5], 1);
        let (loss, grad) = softmax_nll(&logits, &[0, 1, 2, 3], &[false; 4]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unmasked_rows_get_zero_grad() {
        let logits = random(&[3, 4], 2);
        let (_, grad) = softmax_nll(&logits, &[1, 2, 3], &[true, false, true]).unwrap();
        assert!(grad.data()[4..8].iter().all(|&g| g == 0.0));
        assert!(grad.data()[0..4].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn loss_invariant_to_logit_shift() {
        let logits = random(&[2, 6], 3);
        let labels = [4usize, 0];
        let mask = [true, true];
        let (l1, _) = softmax_nll(&logits, &labels, &mask).unwrap();
        let mut shifted = logits.clone();
        for row in 0..2 {
            for v in &mut shifted.data_mut()[row * 6..(row + 1) * 6] {
                *v += 123.456;
            }
        }
        let (l2, _) = softmax_nll(&shifted, &labels, &mask).unwrap();
        assert!((l1 - l2).abs() <= 1e-12, "{l1} vs {l2}");
    }

    #[test]
    fn large_logits_stay_finite() {
        let logits = Tensor::from_vec(&[1, 3], vec![1000.0, 999.0, -1000.0]).unwrap();
        let (loss, grad) = softmax_nll(&logits, &[0], &[true]).unwrap();
        assert!(loss.is_finite());
        assert!(grad.data().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn out_of_range_label_errors() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(softmax_nll(&logits, &[0, 3], &[true, true]).is_err());
    }

    #[test]
    fn nll_grad_matches_finite_differences() {
        let logits = random(&[3, 5], 4);
        let labels = [2usize, 0, 4];
        let mask = [true, false, true];
        let (_, grad) = softmax_nll(&logits, &labels, &mask).unwrap();
        let eps = 1e-5;
        for idx in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[idx] += eps;
            let mut m = logits.clone();
            m.data_mut()[idx] -= eps;
            let (lp, _) = softmax_nll(&p, &labels, &mask).unwrap();
            let (lm, _) = softmax_nll(&m, &labels, &mask).unwrap();
            let num = (lp - lm) / (2.0 * eps);
            let ana = grad.data()[idx];
            assert!(
                (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8) < 1e-4,
                "idx {idx}: {ana} vs {num}"
            );
        }
    }

    #[test]
    fn l2_of_equal_tensors_is_zero() {
        let a = random(&[2, 3], 5);
        let (loss, grad) = l2_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l2_definition() {
        let a = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let (loss, grad) = l2_loss(&a, &b).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn l2_grad_matches_finite_differences() {
        let a = random(&[3, 4], 6);
        let b = random(&[3, 4], 7);
        let (_, grad) = l2_loss(&a, &b).unwrap();
        let eps = 1e-5;
        for idx in 0..a.len() {
            let mut p = a.clone();
            p.data_mut()[idx] += eps;
            let mut m = a.clone();
            m.data_mut()[idx] -= eps;
            let num = (l2_loss(&p, &b).unwrap().0 - l2_loss(&m, &b).unwrap().0) / (2.0 * eps);
            let ana = grad.data()[idx];
            assert!(
                (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8) < 1e-4,
                "idx {idx}: {ana} vs {num}"
            );
        }
    }

    #[test]
    fn l2_shape_mismatch_errors() {
        assert!(l2_loss(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn l1_definition_and_sign_zero() {
        let (loss, grad) = l1_penalty(&Tensor::zeros(&[4]), 2.0);
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));

        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.0]).unwrap();
        let (loss, grad) = l1_penalty(&x, 1.0);
        assert_eq!(loss, 3.0);
        assert_eq!(grad.data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn l1_grad_matches_finite_differences_off_zero() {
        let mut x = random(&[10], 8);
        // keep every coordinate away from the kink
        for v in x.data_mut() {
            if v.abs() < 0.1 {
                *v += 0.2 * v.signum() + if *v == 0.0 { 0.2 } else { 0.0 };
            }
        }
        let w = 0.7;
        let (_, grad) = l1_penalty(&x, w);
        let eps = 1e-5;
        for idx in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[idx] += eps;
            let mut m = x.clone();
            m.data_mut()[idx] -= eps;
            let num = (l1_penalty(&p, w).0 - l1_penalty(&m, w).0) / (2.0 * eps);
            let ana = grad.data()[idx];
            assert!((ana - num).abs() < 1e-6, "idx {idx}: {ana} vs {num}");
        }
    }
}
