//! IDX container parsing: big-endian magic and dimensions, unsigned-byte
//! payload, as used by the MNIST distribution files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::data(path.display().to_string(), message)
}

fn read_u32_be(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| data_err(path, format!("truncated reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_payload(r: &mut impl Read, expected: usize, path: &Path) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(expected);
    r.take(expected as u64 + 1)
        .read_to_end(&mut payload)
        .map_err(|e| data_err(path, format!("reading payload: {e}")))?;
    if payload.len() != expected {
        return Err(data_err(
            path,
            format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len().min(expected)
            ),
        ));
    }
    Ok(payload)
}

/// Load an IDX image file (magic 0x00000803) and optionally its label file
/// (magic 0x00000801). Pixels are scaled to `[0,1]` by dividing by 255.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let mut r = BufReader::new(
        File::open(images).map_err(|e| data_err(images, format!("open: {e}")))?,
    );
    let magic = read_u32_be(&mut r, images, "magic")?;
    if magic != MAGIC_IMAGES {
        return Err(data_err(
            images,
            format!("bad magic {magic:#010x}, expected {MAGIC_IMAGES:#010x} (images)"),
        ));
    }
    let n = read_u32_be(&mut r, images, "image count")? as usize;
    let h = read_u32_be(&mut r, images, "row count")? as usize;
    let w = read_u32_be(&mut r, images, "column count")? as usize;
    let payload = read_payload(&mut r, n * h * w, images)?;
    let mut tensor = Tensor::zeros(&[n, 1, h, w]);
    for (out, &byte) in tensor.data_mut().iter_mut().zip(&payload) {
        *out = byte as f64 / 255.0;
    }

    let labels = match labels {
        None => None,
        Some(path) => {
            let mut r = BufReader::new(
                File::open(path).map_err(|e| data_err(path, format!("open: {e}")))?,
            );
            let magic = read_u32_be(&mut r, path, "magic")?;
            if magic != MAGIC_LABELS {
                return Err(data_err(
                    path,
                    format!("bad magic {magic:#010x}, expected {MAGIC_LABELS:#010x} (labels)"),
                ));
            }
            let count = read_u32_be(&mut r, path, "label count")? as usize;
            if count != n {
                return Err(data_err(
                    path,
                    format!("{count} labels for {n} images"),
                ));
            }
            let bytes = read_payload(&mut r, count, path)?;
            Some(bytes.into_iter().map(|b| b as usize).collect())
        }
    };

    let name = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    Dataset::new(tensor, labels, name)
}

/// Write raw bytes as an IDX image file (test fixtures and exports).
pub fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(Error::invalid(format!(
            "{} pixels for {n}x{h}x{w} images",
            pixels.len()
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&MAGIC_IMAGES.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(h as u32).to_be_bytes())?;
    f.write_all(&(w as u32).to_be_bytes())?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// Write labels as an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&MAGIC_LABELS.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    f.flush()?;
    Ok(())
}
