//! Self-contained digit corpus: seven-segment glyphs rendered with
//! position jitter, per-segment intensity variation, blur, and pixel
//! noise. Stands in for handwritten digits when no IDX files are at hand;
//! same 10-class layout, 32x32 by default so every pool size up to 16
//! divides evenly.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, STREAM_SYNTH};
use crate::tensor::Tensor;
use rand::Rng;

/// Segment rectangles (y0, y1, x0, x1) in a 12-wide, 20-tall glyph box,
/// in the order A (top), B (top-right), C (bottom-right), D (bottom),
/// E (bottom-left), F (top-left), G (middle).
const SEGMENTS: [(usize, usize, usize, usize); 7] = [
    (0, 2, 2, 10),
    (2, 9, 10, 12),
    (11, 18, 10, 12),
    (18, 20, 2, 10),
    (11, 18, 0, 2),
    (2, 9, 0, 2),
    (9, 11, 2, 10),
];
const BOX_W: usize = 12;
const BOX_H: usize = 20;

/// Active-segment bitmask per digit, bit i = SEGMENTS[i].
const DIGIT_SEGMENTS: [u8; 10] = [
    0b0111111, // 0: ABCDEF
    0b0000110, // 1: BC
    0b1011011, // 2: ABDEG
    0b1001111, // 3: ABCDG
    0b1100110, // 4: BCFG
    0b1101101, // 5: ACDFG
    0b1111101, // 6: ACDEFG
    0b0000111, // 7: ABC
    0b1111111, // 8: all
    0b1101111, // 9: ABCDFG
];

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Uniform glyph offset in [-jitter, +jitter] per axis.
    pub jitter: usize,
    /// Additive per-pixel noise amplitude, uniform in [0, noise].
    pub noise: f64,
    /// Lower bound of per-segment intensity (upper bound 1.0).
    pub min_intensity: f64,
    /// One 3x3 mean-filter pass to soften segment edges.
    pub blur: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 32,
            width: 32,
            jitter: 2,
            noise: 0.1,
            min_intensity: 0.55,
            blur: true,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(usize, usize)> {
        // glyph box top-left before jitter; keep the box in frame at
        // maximum jitter so shifts up to the margin never clip content
        if self.width < BOX_W + 2 || self.height < BOX_H + 2 {
            return Err(Error::invalid(format!(
                "canvas {}x{} too small for a {BOX_H}x{BOX_W} glyph",
                self.height, self.width
            )));
        }
        let x0 = (self.width - BOX_W) / 2;
        let y0 = (self.height - BOX_H) / 2;
        if self.jitter > x0 || self.jitter > y0 {
            return Err(Error::invalid(format!(
                "jitter {} exceeds glyph margins ({y0}, {x0})",
                self.jitter
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..1.0).contains(&self.min_intensity) {
            return Err(Error::invalid(
                "noise must be in [0,1] and min_intensity in [0,1)",
            ));
        }
        Ok((y0, x0))
    }
}

/// Generate `n` digits with labels assigned round-robin (`i % 10`), so any
/// prefix of size 10k is exactly class-balanced. Deterministic per seed.
pub fn synth_digits(n: usize, seed: u64, config: &SynthConfig) -> Result<Dataset> {
    let (oy, ox) = config.validate()?;
    let (h, w) = (config.height, config.width);
    if n == 0 {
        return Dataset::new(Tensor::zeros(&[0, 1, h, w]), Some(Vec::new()), "synth");
    }
    let mut rng = rng::stream(seed, STREAM_SYNTH);
    let mut images = Tensor::zeros(&[n, 1, h, w]);
    let mut canvas = vec![0.0f64; h * w];
    let mut blurred = vec![0.0f64; h * w];
    let j = config.jitter as i64;
    for i in 0..n {
        let digit = i % 10;
        // fixed per-sample draw order: jitter, 7 intensities, contrast
        let jx = rng.gen_range(-j..=j);
        let jy = rng.gen_range(-j..=j);
        let mut seg_intensity = [0.0f64; 7];
        for s in &mut seg_intensity {
            *s = rng.gen_range(config.min_intensity..1.0);
        }
        let contrast: f64 = rng.gen_range(0.75..1.0);

        canvas.iter_mut().for_each(|v| *v = 0.0);
        let (gx, gy) = ((ox as i64 + jx) as usize, (oy as i64 + jy) as usize);
        for (s, &(y0, y1, x0, x1)) in SEGMENTS.iter().enumerate() {
            if DIGIT_SEGMENTS[digit] & (1 << s) == 0 {
                continue;
            }
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = &mut canvas[(gy + y) * w + gx + x];
                    *px = px.max(seg_intensity[s]);
                }
            }
        }
        let source = if config.blur {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                            if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                                acc += canvas[yy as usize * w + xx as usize];
                            }
                        }
                    }
                    blurred[y * w + x] = acc / 9.0;
                }
            }
            &blurred
        } else {
            &canvas
        };
        let out = &mut images.data_mut()[i * h * w..(i + 1) * h * w];
        if config.noise > 0.0 {
            for (o, &v) in out.iter_mut().zip(source) {
                *o = (v * contrast + rng.gen_range(0.0..config.noise)).clamp(0.0, 1.0);
            }
        } else {
            for (o, &v) in out.iter_mut().zip(source) {
                *o = (v * contrast).clamp(0.0, 1.0);
            }
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    Dataset::new(images, Some(labels), "synth")
}
