//! Binary PGM (P5) grid rendering for reconstruction figures. Output is
//! visualization only and never feeds back into training.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SEPARATOR: u8 = 255;

/// Tile single-channel images into a grid with 1-pixel separators to the
/// right of and below each cell, min-max scaling each image to 0-255
/// independently (constant images become mid-gray 128).
pub fn to_pgm(images: &Tensor, path: &Path, cols: usize) -> Result<()> {
    if images.rank() != 4 || images.shape()[1] != 1 {
        return Err(Error::invalid(format!(
            "to_pgm expects [N, 1, H, W] images, got {:?}",
            images.shape()
        )));
    }
    let (n, h, w) = (images.shape()[0], images.shape()[2], images.shape()[3]);
    if n == 0 || cols == 0 {
        return Err(Error::invalid("to_pgm needs at least one image and one column"));
    }
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (ch, cw) = (rows * (h + 1), cols * (w + 1));

    let mut canvas = vec![0u8; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            if y % (h + 1) == h || x % (w + 1) == w {
                canvas[y * cw + x] = SEPARATOR;
            }
        }
    }
    for i in 0..n {
        let (gy, gx) = (i / cols, i % cols);
        let cell = &images.data()[i * h * w..(i + 1) * h * w];
        let min = cell.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for y in 0..h {
            for x in 0..w {
                let v = cell[y * w + x];
                let byte = if max > min {
                    ((v - min) / (max - min) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    128
                };
                canvas[(gy * (h + 1) + y) * cw + gx * (w + 1) + x] = byte;
            }
        }
    }

    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{cw} {ch}\n255\n")?;
    f.write_all(&canvas)?;
    f.flush()?;
    Ok(())
}
