//! Integer image translation with zero fill, plus the seeded random
//! variant used for augmentation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Shift every image by (`dx`, `dy`): `out(c, y, x) = in(c, y-dy, x-dx)`,
/// zero outside bounds. Positive `dx` moves content right, positive `dy`
/// moves it down.
pub fn translate(images: &Tensor, dx: i64, dy: i64) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::invalid("translate expects [N, C, H, W] images"));
    }
    let (n, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
        return Err(Error::invalid(format!(
            "shift ({dx}, {dy}) out of range for {h}x{w} images"
        )));
    }
    let mut out = Tensor::zeros(images.shape());
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let sy = y as i64 - dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w {
                    let sx = x as i64 - dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    out.set4(i, ch, y, x, images.at4(i, ch, sy as usize, sx as usize));
                }
            }
        }
    }
    Ok(out)
}

/// Shift each image independently by uniform integer offsets in
/// `[-max_shift, max_shift]` per axis (dx drawn before dy, per image).
pub fn random_translate(images: &Tensor, max_shift: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::invalid("random_translate expects [N, C, H, W] images"));
    }
    if max_shift == 0 {
        return Ok(images.clone());
    }
    let m = max_shift as i64;
    let n = images.shape()[0];
    let mut out = Tensor::zeros(images.shape());
    let stride = images.len() / n.max(1);
    for i in 0..n {
        let dx = rng.gen_range(-m..=m);
        let dy = rng.gen_range(-m..=m);
        let one = images
            .data()
            .get(i * stride..(i + 1) * stride)
            .expect("row in range");
        let mut single = Tensor::zeros(&[1, images.shape()[1], images.shape()[2], images.shape()[3]]);
        single.data_mut().copy_from_slice(one);
        let shifted = translate(&single, dx, dy)?;
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(shifted.data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn single_pixel(h: usize, w: usize, y: usize, x: usize) -> Tensor {
        let mut t = Tensor::zeros(&[1, 1, h, w]);
        t.set4(0, 0, y, x, 1.0);
        t
    }

    #[test]
    fn zero_shift_is_identity() {
        let t = single_pixel(5, 5, 2, 3);
        assert_eq!(translate(&t, 0, 0).unwrap(), t);
    }

    #[test]
    fn pixel_moves_exactly_dx_dy() {
        let t = single_pixel(7, 7, 3, 3);
        let s = translate(&t, 2, -1).unwrap();
        assert_eq!(s.at4(0, 0, 2, 5), 1.0);
        assert_eq!(s.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn round_trip_within_margins_is_identity() {
        // content sits in the middle with 3-pixel zero margins
        let mut t = Tensor::zeros(&[1, 1, 9, 9]);
        for y in 3..6 {
            for x in 3..6 {
                t.set4(0, 0, y, x, (y * 9 + x) as f64);
            }
        }
        let back = translate(&translate(&t, 3, 0).unwrap(), -3, 0).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn mass_preserved_while_in_bounds_lost_off_edge() {
        let t = single_pixel(4, 4, 0, 0);
        let kept = translate(&t, 1, 1).unwrap();
        assert_eq!(kept.data().iter().sum::<f64>(), 1.0);
        let lost = translate(&t, -1, 0).unwrap();
        assert_eq!(lost.data().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn out_of_range_shift_errors() {
        let t = single_pixel(4, 4, 0, 0);
        assert!(translate(&t, 4, 0).is_err());
        assert!(translate(&t, 0, -4).is_err());
    }

    #[test]
    fn random_translate_is_reproducible_and_identity_at_zero() {
        let mut imgs = Tensor::zeros(&[6, 1, 8, 8]);
        for i in 0..6 {
            imgs.set4(i, 0, 4, 4, 1.0 + i as f64);
        }
        let mut r1 = rng::stream(5, 0);
        let mut r2 = rng::stream(5, 0);
        let a = random_translate(&imgs, 2, &mut r1).unwrap();
        let b = random_translate(&imgs, 2, &mut r2).unwrap();
        assert_eq!(a, b);

        let mut r3 = rng::stream(5, 0);
        let c = random_translate(&imgs, 0, &mut r3).unwrap();
        assert_eq!(c, imgs);
    }

    #[test]
    fn random_shift_histogram_is_uniform() {
        // 10^4 draws over the 5 values of one axis; chi-square with 4
        // degrees of freedom: reject above 13.28 (p = 0.01)
        let imgs = single_pixel(11, 11, 5, 5);
        let mut r = rng::stream(99, 0);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let shifted = random_translate(&imgs, 2, &mut r).unwrap();
            let pos = shifted.data().iter().position(|&v| v == 1.0).unwrap();
            let x = pos % 11;
            counts[x - 3] += 1;
        }
        let expected = 10_000.0 / 5.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 13.28, "chi2 {chi2}, counts {counts:?}");
    }
}
