//! Shared plumbing for the experiment commands: data resolution, output
//! directories, config echoes, CSV writing, and small statistics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use swwae_core::data::{load_idx, synth_digits, Dataset, SynthConfig};
use swwae_core::rng::derive;
use swwae_core::{Error, Result, Tensor};

use crate::DataOpts;

/// Derivation tags for the synthetic train/test splits. Arbitrary fixed
/// values; they only need to be distinct so the splits never overlap.
const SYNTH_TRAIN_TAG: u64 = 101;
const SYNTH_TEST_TAG: u64 = 102;

const DESK_TRAIN: usize = 2000;
const DESK_TEST: usize = 500;
const FULL_TRAIN: usize = 60_000;
const FULL_TEST: usize = 10_000;

/// Resolve the train/test datasets: IDX files when given, otherwise two
/// disjoint seeded synthetic digit sets, truncated to the requested sizes.
pub fn load_data(opts: &DataOpts, seed: u64) -> Result<(Dataset, Dataset)> {
    let train_size = opts
        .train_size
        .unwrap_or(if opts.paper_scale { FULL_TRAIN } else { DESK_TRAIN });
    let test_size = opts
        .test_size
        .unwrap_or(if opts.paper_scale { FULL_TEST } else { DESK_TEST });

    let synth_cfg = SynthConfig {
        jitter: opts.jitter,
        noise: opts.noise,
        ..SynthConfig::default()
    };
    let mut train = match &opts.train_images {
        Some(images) => truncate(
            load_idx(images, opts.train_labels.as_deref())?,
            train_size,
        )?,
        None => synth_digits(train_size, derive(seed, SYNTH_TRAIN_TAG), &synth_cfg)?,
    };
    let mut test = match &opts.test_images {
        Some(images) => truncate(load_idx(images, opts.test_labels.as_deref())?, test_size)?,
        None => synth_digits(test_size, derive(seed, SYNTH_TEST_TAG), &synth_cfg)?,
    };
    if !opts.raw {
        train.standardize();
        test.standardize();
    }
    if train.image_shape() != test.image_shape() {
        return Err(Error::invalid(format!(
            "train images are {:?} but test images are {:?}",
            train.image_shape(),
            test.image_shape()
        )));
    }
    Ok((train, test))
}

fn truncate(ds: Dataset, n: usize) -> Result<Dataset> {
    if n >= ds.len() {
        return Ok(ds);
    }
    let indices: Vec<usize> = (0..n).collect();
    ds.select(&indices)
}

/// Create the output directory and echo the resolved configuration into
/// `config.txt`, one `key = value` line per entry.
pub fn write_config(out: &Path, command: &str, entries: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut f = BufWriter::new(File::create(out.join("config.txt"))?);
    writeln!(f, "command = {command}")?;
    for (key, value) in entries {
        writeln!(f, "{key} = {value}")?;
    }
    f.flush()?;
    Ok(())
}

/// Write a CSV with the given header and pre-formatted rows.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    f.flush()?;
    Ok(())
}

/// Format flags that may be absent (data paths) for the config echo.
pub fn opt_path(p: &Option<std::path::PathBuf>) -> String {
    match p {
        Some(p) => p.display().to_string(),
        None => "none".to_string(),
    }
}

pub fn data_entries(opts: &DataOpts, train: &Dataset, test: &Dataset) -> Vec<(&'static str, String)> {
    vec![
        ("train_images", opt_path(&opts.train_images)),
        ("train_labels", opt_path(&opts.train_labels)),
        ("test_images", opt_path(&opts.test_images)),
        ("test_labels", opt_path(&opts.test_labels)),
        ("train_size", train.len().to_string()),
        ("test_size", test.len().to_string()),
        ("paper_scale", opts.paper_scale.to_string()),
        ("jitter", opts.jitter.to_string()),
        ("noise", opts.noise.to_string()),
        ("raw", opts.raw.to_string()),
    ]
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Pearson correlation; 0 when either side has no variance.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Copy rows `[start, stop)` of the leading axis into a new tensor.
pub fn slice_rows(t: &Tensor, start: usize, stop: usize) -> Result<Tensor> {
    let n = t.shape()[0];
    if start > stop || stop > n {
        return Err(Error::invalid(format!(
            "row range {start}..{stop} out of bounds for {n} rows"
        )));
    }
    let row = t.len() / n;
    let mut shape = t.shape().to_vec();
    shape[0] = stop - start;
    Tensor::from_vec(&shape, t.data()[start * row..stop * row].to_vec())
}

/// Stack per-row image tensors (each `[k, 1, h, w]`) into one batch for a
/// montage.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    let shape = rows[0].shape();
    let (h, w) = (shape[2], shape[3]);
    let total: usize = rows.iter().map(|r| r.shape()[0]).sum();
    let mut out = Tensor::zeros(&[total, 1, h, w]);
    let mut offset = 0;
    for row in rows {
        if row.shape()[2] != h || row.shape()[3] != w {
            return Err(Error::shape_mismatch(rows[0].shape(), row.shape()));
        }
        let len = row.len();
        out.data_mut()[offset..offset + len].copy_from_slice(row.data());
        offset += len;
    }
    Ok(out)
}
