//! `swwae lambda-sweep`: semi-supervised error as a function of the
//! reconstruction weight, with the input and intermediate terms tied
//! (λ_L2rec = λ_L2M = λ). λ = 0 is the plain supervised baseline.
//!
//! Cells are paired: within one (label-count, round) cell every λ shares
//! the same initialization, labeled subset, and batch order, so the λ
//! effect is isolated from sampling noise.

use std::path::PathBuf;

use clap::Args;
use swwae_core::archdsl::parse_architecture;
use swwae_core::data::sample_labeled_subset;
use swwae_core::rng::derive;
use swwae_core::swwae::{Modality, SwwaeConfig, SwwaeModel};
use swwae_core::train::{evaluate, train_run, Regime};
use swwae_core::Result;

use crate::common::{data_entries, load_data, mean_sd, write_config, write_csv};
use crate::{DataOpts, OptimOpts, PoolArg};

#[derive(Args, Debug)]
pub struct SweepCmd {
    #[arg(long, default_value = "(16)5c-2p-(16)3c-2p-(16)3c-2p-10fc")]
    pub arch: String,
    #[arg(long, value_enum, default_value_t = PoolArg::Hard)]
    pub pool: PoolArg,
    #[arg(long, default_value_t = 100.0)]
    pub beta: f64,
    #[arg(long)]
    pub batchnorm: bool,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// reconstruction weights to sweep (applied to both L2 terms)
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.8,1.6,3.2")]
    pub lambda_grid: Vec<f64>,
    /// labeled-subset sizes to sweep
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub labels_grid: Vec<usize>,
    /// independent repetitions per cell (fresh subset and initialization)
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    #[command(flatten)]
    pub optim: OptimOpts,
    #[command(flatten)]
    pub data: DataOpts,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cmd: &SweepCmd) -> Result<u8> {
    let arch = parse_architecture(&cmd.arch)?;
    let (train, test) = load_data(&cmd.data, cmd.optim.seed)?;
    let (c, h, w) = train.image_shape();
    let base_cfg = cmd.optim.to_config(15, 0);

    let fmt_f64s = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let fmt_usizes =
        |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let mut entries = vec![
        ("arch", cmd.arch.clone()),
        ("pool", format!("{:?}", cmd.pool).to_lowercase()),
        ("beta", cmd.beta.to_string()),
        ("batchnorm", cmd.batchnorm.to_string()),
        ("dropout", cmd.dropout.to_string()),
        ("lambda_grid", fmt_f64s(&cmd.lambda_grid)),
        ("labels_grid", fmt_usizes(&cmd.labels_grid)),
        ("rounds", cmd.rounds.to_string()),
        ("epochs", base_cfg.epochs.to_string()),
        ("batch_size", base_cfg.batch_size.to_string()),
        ("lr", base_cfg.lr.to_string()),
        ("momentum", base_cfg.momentum.to_string()),
        ("seed", base_cfg.seed.to_string()),
        ("augment", base_cfg.augment.to_string()),
    ];
    entries.extend(data_entries(&cmd.data, &train, &test));
    write_config(&cmd.out, "lambda-sweep", &entries)?;


    // errs[n_idx][lambda_idx][round], in percent
    let mut errs =
        vec![vec![vec![f64::NAN; cmd.rounds]; cmd.lambda_grid.len()]; cmd.labels_grid.len()];
    for (n_idx, &n_labels) in cmd.labels_grid.iter().enumerate() {
        for round in 0..cmd.rounds {
            let round_seed = derive(derive(cmd.optim.seed, n_idx as u64), round as u64);
            let labeled = sample_labeled_subset(&train, n_labels, round_seed)?.flags(train.len());
            for (l_idx, &lambda) in cmd.lambda_grid.iter().enumerate() {
                let config = SwwaeConfig {
                    lambda_nll: 1.0,
                    lambda_l2rec: lambda,
                    lambda_l2m: lambda,
                    pool_mode: cmd.pool.to_mode(cmd.beta),
                    dropout: cmd.dropout,
                    batchnorm: cmd.batchnorm,
                    decoder_batchnorm: cmd.batchnorm,
                    ..SwwaeConfig::default()
                };
                let mut model =
                    SwwaeModel::new(&arch, c, h, w, config, lambda > 0.0, round_seed)?;
                model.set_modality(Modality::Semi);
                let cfg = swwae_core::train::TrainConfig {
                    seed: round_seed,
                    ..base_cfg
                };
                train_run(&mut model, &train, &labeled, None, &cfg, Regime::Joint)?;
                let err = evaluate(&mut model, &test)? * 100.0;
                errs[n_idx][l_idx][round] = err;
                println!(
                    "labels {n_labels}, lambda {lambda}, round {round}: error {err:.2}%"
                );
            }
        }
    }

    let mut rows = Vec::new();
    for (n_idx, &n_labels) in cmd.labels_grid.iter().enumerate() {
        for (l_idx, &lambda) in cmd.lambda_grid.iter().enumerate() {
            let (mean, sd) = mean_sd(&errs[n_idx][l_idx]);
            rows.push(format!("{n_labels},{lambda},{mean},{sd},{}", cmd.rounds));
        }
    }

    write_csv(
        &cmd.out.join("sweep.csv"),
        "n_labels,lambda,mean_err,sd_err,rounds",
        &rows,
    )?;
    Ok(0)
}
