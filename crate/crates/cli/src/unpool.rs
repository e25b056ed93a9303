//! `swwae unpool-vs-upsample`: train one-stage auto-encoders over a range
//! of pooling sizes and compare reconstruction through the where pathway
//! against where-free upsampling.

use std::path::PathBuf;

use clap::Args;
use swwae_core::archdsl::parse_architecture;
use swwae_core::data::to_pgm;
use swwae_core::nn::l2_loss;
use swwae_core::pooling::PoolMode;
use swwae_core::swwae::{LateralKind, Modality, SwwaeConfig, SwwaeModel};
use swwae_core::train::{train_run, Regime};
use swwae_core::{Result, Tensor};

use crate::common::{data_entries, load_data, slice_rows, stack_rows, write_config, write_csv};
use crate::{DataOpts, OptimOpts};

const MONTAGE_COLS: usize = 10;
const EVAL_CHUNK: usize = 64;

#[derive(Args, Debug)]
pub struct UnpoolCmd {
    /// pooling sizes to sweep
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    pub pool_sizes: Vec<usize>,
    /// feature maps of the two convolution layers
    #[arg(long, default_value_t = 16)]
    pub maps1: usize,
    #[arg(long, default_value_t = 32)]
    pub maps2: usize,
    #[command(flatten)]
    pub optim: OptimOpts,
    #[command(flatten)]
    pub data: DataOpts,
    #[arg(long)]
    pub out: PathBuf,
}

/// Mean squared reconstruction error over the whole set, plus the first
/// `MONTAGE_COLS` reconstructions, evaluated in fixed-size chunks.
fn reconstruction_mse(
    model: &mut SwwaeModel,
    images: &Tensor,
    kind: LateralKind,
) -> Result<(f64, Tensor)> {
    let n = images.shape()[0];
    let sample_elems = images.len() / n;
    let mut sse = 0.0;
    let mut montage: Option<Tensor> = None;
    let mut start = 0;
    while start < n {
        let stop = (start + EVAL_CHUNK).min(n);
        let chunk = slice_rows(images, start, stop)?;
        let recon = model.reconstruct_via(&chunk, kind)?;
        let (mse_chunk, _) = l2_loss(&recon, &chunk)?;
        sse += mse_chunk * ((stop - start) * sample_elems) as f64;
        if start == 0 {
            montage = Some(slice_rows(&recon, 0, MONTAGE_COLS.min(stop))?);
        }
        start = stop;
    }
    Ok((sse / (n * sample_elems) as f64, montage.unwrap()))
}

pub fn run(cmd: &UnpoolCmd) -> Result<u8> {
    let (train, test) = load_data(&cmd.data, cmd.optim.seed)?;
    let (c, h, w) = train.image_shape();
    let train_cfg = cmd.optim.to_config(5, 0);
    let unlabeled = vec![false; train.len()];

    let mut csv_rows = Vec::new();
    let originals = slice_rows(&test.images, 0, MONTAGE_COLS.min(test.len()))?;
    let mut unpool_rows = vec![originals.clone()];
    let mut upsample_rows = vec![originals];

    let mut entries = vec![
        (
            "pool_sizes",
            cmd.pool_sizes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("maps1", cmd.maps1.to_string()),
        ("maps2", cmd.maps2.to_string()),
        ("epochs", train_cfg.epochs.to_string()),
        ("batch_size", train_cfg.batch_size.to_string()),
        ("lr", train_cfg.lr.to_string()),
        ("momentum", train_cfg.momentum.to_string()),
        ("seed", train_cfg.seed.to_string()),
    ];
    entries.extend(data_entries(&cmd.data, &train, &test));
    write_config(&cmd.out, "unpool-vs-upsample", &entries)?;


    for &size in &cmd.pool_sizes {
        let arch_text = format!("({})5c-({})3c-{}p", cmd.maps1, cmd.maps2, size);
        let arch = parse_architecture(&arch_text)?;
        let config = SwwaeConfig {
            lambda_nll: 0.0,
            lambda_l2rec: 1.0,
            lambda_l2m: 0.0,
            pool_mode: PoolMode::Hard,
            ..SwwaeConfig::default()
        };
        let mut model = SwwaeModel::new(&arch, c, h, w, config, true, cmd.optim.seed)?;
        model.set_modality(Modality::Unsupervised);
        train_run(&mut model, &train, &unlabeled, None, &train_cfg, Regime::Joint)?;

        let (mse_unpool, grid_unpool) =
            reconstruction_mse(&mut model, &test.images, LateralKind::Where)?;
        let (mse_upsample, grid_upsample) =
            reconstruction_mse(&mut model, &test.images, LateralKind::Upsample)?;
        println!(
            "pool {size:>2}: mse via unpooling {mse_unpool:.6}, via upsampling {mse_upsample:.6}"
        );
        csv_rows.push(format!("{size},{mse_unpool},{mse_upsample}"));
        unpool_rows.push(grid_unpool);
        upsample_rows.push(grid_upsample);
    }

    write_csv(
        &cmd.out.join("mse.csv"),
        "pool_size,mse_unpool,mse_upsample",
        &csv_rows,
    )?;
    // montage rows: originals on top, then one reconstruction row per size
    to_pgm(
        &stack_rows(&unpool_rows)?,
        &cmd.out.join("recon_unpool.pgm"),
        MONTAGE_COLS,
    )?;
    to_pgm(
        &stack_rows(&upsample_rows)?,
        &cmd.out.join("recon_upsample.pgm"),
        MONTAGE_COLS,
    )?;
    Ok(0)
}
