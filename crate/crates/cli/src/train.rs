//! `swwae train`: one training run, any modality or regime.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::Args;
use swwae_core::archdsl::parse_architecture;
use swwae_core::data::sample_labeled_subset;
use swwae_core::swwae::{save_checkpoint_file, SwwaeConfig, SwwaeModel};
use swwae_core::train::{train_run, write_history_csv};
use swwae_core::Result;

use crate::common::{data_entries, load_data, write_config};
use crate::{DataOpts, ModeArg, OptimOpts, PoolArg, RegimeArg};

#[derive(Args, Debug)]
pub struct TrainCmd {
    /// architecture string, e.g. "(16)5c-2p-(16)3c-2p-(16)3c-2p-10fc"
    #[arg(long, default_value = "(16)5c-2p-(16)3c-2p-(16)3c-2p-10fc")]
    pub arch: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Semi)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = PoolArg::Hard)]
    pub pool: PoolArg,
    /// soft-pooling temperature
    #[arg(long, default_value_t = 100.0)]
    pub beta: f64,
    /// classification loss weight
    #[arg(long, default_value_t = 1.0)]
    pub lnll: f64,
    /// input-reconstruction loss weight
    #[arg(long, default_value_t = 0.5)]
    pub lrec: f64,
    /// intermediate-reconstruction loss weight
    #[arg(long, default_value_t = 0.5)]
    pub lm: f64,
    /// L1 activation sparsity weight
    #[arg(long, default_value_t = 0.0)]
    pub l1: f64,
    /// dropout before fully-connected layers
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// dropout after each convolution block
    #[arg(long, default_value_t = 0.0)]
    pub conv_dropout: f64,
    /// batch-normalize convolution outputs
    #[arg(long)]
    pub batchnorm: bool,
    /// labeled-subset size; every sample is labeled when omitted, none at 0
    #[arg(long)]
    pub labels: Option<usize>,
    #[arg(long, value_enum, default_value_t = RegimeArg::Joint)]
    pub regime: RegimeArg,
    /// build the classifier pathway only (no decoder)
    #[arg(long)]
    pub no_decoder: bool,
    #[command(flatten)]
    pub optim: OptimOpts,
    #[command(flatten)]
    pub data: DataOpts,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cmd: &TrainCmd) -> Result<u8> {
    let arch = parse_architecture(&cmd.arch)?;
    let (train, test) = load_data(&cmd.data, cmd.optim.seed)?;
    let (c, h, w) = train.image_shape();

    let labeled = match cmd.labels {
        None => vec![true; train.len()],
        Some(0) => vec![false; train.len()],
        Some(n) => sample_labeled_subset(&train, n, cmd.optim.seed)?.flags(train.len()),
    };

    let config = SwwaeConfig {
        lambda_nll: cmd.lnll,
        lambda_l2rec: cmd.lrec,
        lambda_l2m: cmd.lm,
        pool_mode: cmd.pool.to_mode(cmd.beta),
        dropout: cmd.dropout,
        conv_dropout: cmd.conv_dropout,
        l1_weight: cmd.l1,
        batchnorm: cmd.batchnorm,
        decoder_batchnorm: cmd.batchnorm,
    };
    let with_decoder = !cmd.no_decoder && !arch.conv_pool_prefix().is_empty();
    let mut model = SwwaeModel::new(&arch, c, h, w, config, with_decoder, cmd.optim.seed)?;
    let effective = model.set_modality(cmd.mode.to_modality());

    let train_cfg = cmd.optim.to_config(15, 0);
    // Validation error is only meaningful when something supervises the
    // classifier; otherwise the history carries the NA sentinel.
    let supervised = labeled.iter().any(|&m| m) && effective.lambda_nll > 0.0;
    let val = (supervised && model.has_head() && test.labels.is_some()).then_some(&test);

    let mut entries = vec![
        ("arch", cmd.arch.clone()),
        ("mode", format!("{:?}", cmd.mode).to_lowercase()),
        ("pool", format!("{:?}", cmd.pool).to_lowercase()),
        ("beta", cmd.beta.to_string()),
        ("lnll", cmd.lnll.to_string()),
        ("lrec", cmd.lrec.to_string()),
        ("lm", cmd.lm.to_string()),
        ("l1", cmd.l1.to_string()),
        ("dropout", cmd.dropout.to_string()),
        ("conv_dropout", cmd.conv_dropout.to_string()),
        ("batchnorm", cmd.batchnorm.to_string()),
        (
            "labels",
            cmd.labels.map_or("all".to_string(), |n| n.to_string()),
        ),
        ("regime", format!("{:?}", cmd.regime).to_lowercase()),
        ("no_decoder", cmd.no_decoder.to_string()),
        ("epochs", train_cfg.epochs.to_string()),
        ("batch_size", train_cfg.batch_size.to_string()),
        ("lr", train_cfg.lr.to_string()),
        ("momentum", train_cfg.momentum.to_string()),
        ("seed", train_cfg.seed.to_string()),
        ("augment", train_cfg.augment.to_string()),
    ];
    entries.extend(data_entries(&cmd.data, &train, &test));
    write_config(&cmd.out, "train", &entries)?;

    let history = train_run(
        &mut model,
        &train,
        &labeled,
        val,
        &train_cfg,
        cmd.regime.to_regime(),
    )?;

    let mut f = BufWriter::new(File::create(cmd.out.join("history.csv"))?);
    write_history_csv(&history, &mut f)?;
    save_checkpoint_file(&mut model, &cmd.out.join("model.ckpt"))?;

    if let Some(last) = history.last() {
        match last.val_error {
            Some(err) => println!(
                "epoch {}: total loss {:.6}, validation error {:.2}%",
                last.epoch,
                last.l_total,
                err * 100.0
            ),
            None => println!("epoch {}: total loss {:.6}", last.epoch, last.l_total),
        }
    }
    Ok(0)
}
