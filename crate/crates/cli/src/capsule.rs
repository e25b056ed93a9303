//! `swwae capsule`: train a soft-pooling auto-encoder on translated digits,
//! then measure how the top-stage what/where codes respond when the test
//! digits are shifted — where should move with the input, what should not.

use std::path::PathBuf;

use clap::Args;
use swwae_core::archdsl::parse_architecture;
use swwae_core::data::{to_pgm, translate};
use swwae_core::pooling::WhereMap;
use swwae_core::swwae::{Modality, SwwaeConfig, SwwaeModel};
use swwae_core::train::{train_run, Regime};
use swwae_core::{Error, Result, Tensor};

use crate::common::{
    correlation, data_entries, load_data, slice_rows, stack_rows, write_config, write_csv,
};
use crate::{DataOpts, OptimOpts, PoolArg};

const MONTAGE_COLS: usize = 10;
const EVAL_CHUNK: usize = 64;

#[derive(Args, Debug)]
pub struct CapsuleCmd {
    /// architecture; the final pool must cover the whole map (one region)
    #[arg(long, default_value = "(32)5c-(32)3c-2p-(32)3c-16p")]
    pub arch: String,
    #[arg(long, value_enum, default_value_t = PoolArg::Soft)]
    pub pool: PoolArg,
    /// soft-pooling temperature
    #[arg(long, default_value_t = 100.0)]
    pub beta: f64,
    /// input-reconstruction loss weight
    #[arg(long, default_value_t = 1.0)]
    pub lrec: f64,
    /// intermediate-reconstruction loss weight
    #[arg(long, default_value_t = 0.0)]
    pub lm: f64,
    /// probe translation amplitude in pixels
    #[arg(long, default_value_t = 3)]
    pub shift: i64,
    #[command(flatten)]
    pub optim: OptimOpts,
    #[command(flatten)]
    pub data: DataOpts,
    #[arg(long)]
    pub out: PathBuf,
}

/// Top-stage what / where-x / where-y per (sample, plane), flattened
/// sample-major, computed in fixed-size chunks.
fn top_codes(model: &mut SwwaeModel, images: &Tensor) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = images.shape()[0];
    let mut what = Vec::new();
    let mut px = Vec::new();
    let mut py = Vec::new();
    let mut start = 0;
    while start < n {
        let stop = (start + EVAL_CHUNK).min(n);
        let chunk = slice_rows(images, start, stop)?;
        let (_, pools) = model.encode_pools(&chunk)?;
        let top = pools
            .last()
            .ok_or_else(|| Error::invalid("architecture has no pooling stage"))?;
        if top.what.shape()[2] != 1 || top.what.shape()[3] != 1 {
            return Err(Error::invalid(format!(
                "top pooling stage leaves a {}x{} map; it must cover the whole extent",
                top.what.shape()[2],
                top.what.shape()[3]
            )));
        }
        let WhereMap::Soft { x, y } = &top.where_map else {
            return Err(Error::invalid(
                "capsule probe requires soft pooling (--pool soft)",
            ));
        };
        what.extend_from_slice(top.what.data());
        px.extend_from_slice(x.data());
        py.extend_from_slice(y.data());
        start = stop;
    }
    Ok((what, px, py))
}

pub fn run(cmd: &CapsuleCmd) -> Result<u8> {
    let arch = parse_architecture(&cmd.arch)?;
    let (train, test) = load_data(&cmd.data, cmd.optim.seed)?;
    let (c, h, w) = train.image_shape();
    let train_cfg = cmd.optim.to_config(10, cmd.shift.unsigned_abs() as usize);

    let config = SwwaeConfig {
        lambda_nll: 0.0,
        lambda_l2rec: cmd.lrec,
        lambda_l2m: cmd.lm,
        pool_mode: cmd.pool.to_mode(cmd.beta),
        ..SwwaeConfig::default()
    };
    let mut model = SwwaeModel::new(&arch, c, h, w, config, true, cmd.optim.seed)?;
    model.set_modality(Modality::Unsupervised);

    let mut entries = vec![
        ("arch", cmd.arch.clone()),
        ("pool", format!("{:?}", cmd.pool).to_lowercase()),
        ("beta", cmd.beta.to_string()),
        ("lrec", cmd.lrec.to_string()),
        ("lm", cmd.lm.to_string()),
        ("shift", cmd.shift.to_string()),
        ("epochs", train_cfg.epochs.to_string()),
        ("batch_size", train_cfg.batch_size.to_string()),
        ("lr", train_cfg.lr.to_string()),
        ("momentum", train_cfg.momentum.to_string()),
        ("seed", train_cfg.seed.to_string()),
        ("augment", train_cfg.augment.to_string()),
    ];
    entries.extend(data_entries(&cmd.data, &train, &test));
    write_config(&cmd.out, "capsule", &entries)?;

    let unlabeled = vec![false; train.len()];
    train_run(&mut model, &train, &unlabeled, None, &train_cfg, Regime::Joint)?;

    // what/where scatter over the four probe translations
    let (what_o, px_o, py_o) = top_codes(&mut model, &test.images)?;
    let planes = what_o.len() / test.len();
    let mut rows = Vec::new();
    let mut dxs: Vec<f64> = Vec::new(); // per row: shift sign on each axis
    let mut dys: Vec<f64> = Vec::new();
    let mut d_px: Vec<f64> = Vec::new();
    let mut d_py: Vec<f64> = Vec::new();
    let mut abs_dwhat = 0.0;
    for (direction, sign) in [("h", 1i64), ("h", -1), ("v", 1), ("v", -1)] {
        let (dx, dy) = match direction {
            "h" => (sign * cmd.shift, 0),
            _ => (0, sign * cmd.shift),
        };
        let shifted = translate(&test.images, dx, dy)?;
        let (what_t, px_t, py_t) = top_codes(&mut model, &shifted)?;
        for digit in 0..test.len() {
            for plane in 0..planes {
                let i = digit * planes + plane;
                rows.push(format!(
                    "{plane},{digit},{},{},{},{},{},{},{direction},{sign}",
                    what_o[i], what_t[i], px_o[i], px_t[i], py_o[i], py_t[i]
                ));
                dxs.push((dx as f64).signum());
                dys.push((dy as f64).signum());
                d_px.push(px_t[i] - px_o[i]);
                d_py.push(py_t[i] - py_o[i]);
                abs_dwhat += (what_t[i] - what_o[i]).abs();
            }
        }
    }

    // summary statistics (the CSV is the artifact; these are for the console)
    let h_rows: Vec<usize> = (0..dxs.len()).filter(|&i| dxs[i] != 0.0).collect();
    let v_rows: Vec<usize> = (0..dys.len()).filter(|&i| dys[i] != 0.0).collect();
    let pick = |marks: &[usize], v: &[f64]| marks.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let corr_h_x = correlation(&pick(&h_rows, &dxs), &pick(&h_rows, &d_px));
    let corr_h_y = correlation(&pick(&h_rows, &dxs), &pick(&h_rows, &d_py));
    let corr_v_y = correlation(&pick(&v_rows, &dys), &pick(&v_rows, &d_py));
    let corr_v_x = correlation(&pick(&v_rows, &dys), &pick(&v_rows, &d_px));
    let mean_abs_what = what_o.iter().map(|v| v.abs()).sum::<f64>() / what_o.len() as f64;
    let rel_what_change = (abs_dwhat / dxs.len() as f64) / mean_abs_what;
    println!("horizontal shift: corr(dwhere_x, sign) = {corr_h_x:.3}, corr(dwhere_y, sign) = {corr_h_y:.3}");
    println!("vertical shift:   corr(dwhere_y, sign) = {corr_v_y:.3}, corr(dwhere_x, sign) = {corr_v_x:.3}");
    println!("relative what change = {rel_what_change:.3}");

    // reconstruction grid: originals / reconstructions / +shift / -shift
    let k = MONTAGE_COLS.min(test.len());
    let firsts = slice_rows(&test.images, 0, k)?;
    let grid = stack_rows(&[
        firsts.clone(),
        model.reconstruct(&firsts)?,
        model.reconstruct(&translate(&firsts, cmd.shift, 0)?)?,
        model.reconstruct(&translate(&firsts, -cmd.shift, 0)?)?,
    ])?;
    to_pgm(&grid, &cmd.out.join("recon_grid.pgm"), k)?;

    write_csv(
        &cmd.out.join("scatter.csv"),
        "plane,digit,what_orig,what_trans,where_x_orig,where_x_trans,where_y_orig,where_y_trans,direction,sign",
        &rows,
    )?;
    Ok(0)
}
