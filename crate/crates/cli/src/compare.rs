//! `swwae regularizer-compare`: the joint model against conventional
//! regularizers and disjoint unsupervised/supervised training schedules,
//! under identical seeds and label budgets.
//!
//! Purely supervised baselines (dropout-conv, l1) train on the labeled
//! subset alone; every other mode additionally consumes the unlabeled rows
//! through its reconstruction terms or unsupervised phase.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use swwae_core::archdsl::parse_architecture;
use swwae_core::data::{sample_labeled_subset, Dataset};
use swwae_core::rng::derive;
use swwae_core::swwae::{Modality, SwwaeConfig};
use swwae_core::train::{evaluate, train_run, Regime, TrainConfig};
use swwae_core::Result;

use crate::common::{data_entries, load_data, mean_sd, write_config, write_csv};
use crate::{DataOpts, OptimOpts, PoolArg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CompareMode {
    /// joint classification + reconstruction on all data
    #[value(name = "swwae")]
    Swwae,
    /// supervised with dropout after every convolution block
    #[value(name = "dropout-conv")]
    DropoutConv,
    /// supervised with an L1 activation penalty
    #[value(name = "l1")]
    L1,
    /// unsupervised, then a classifier on the frozen encoder
    #[value(name = "unsup-sfx")]
    UnsupSfx,
    /// unsupervised, then supervised fine-tuning
    #[value(name = "unsup-pretr")]
    UnsupPretr,
    /// joint, but without the intermediate reconstruction terms
    #[value(name = "noL2M")]
    NoL2m,
}

impl CompareMode {
    fn label(self) -> &'static str {
        match self {
            CompareMode::Swwae => "swwae",
            CompareMode::DropoutConv => "dropout-conv",
            CompareMode::L1 => "l1",
            CompareMode::UnsupSfx => "unsup-sfx",
            CompareMode::UnsupPretr => "unsup-pretr",
            CompareMode::NoL2m => "noL2M",
        }
    }
}

#[derive(Args, Debug)]
pub struct CompareCmd {
    #[arg(long, default_value = "(16)5c-2p-(16)3c-2p-(16)3c-2p-10fc")]
    pub arch: String,
    #[arg(long, value_enum, default_value_t = PoolArg::Hard)]
    pub pool: PoolArg,
    #[arg(long, default_value_t = 100.0)]
    pub beta: f64,
    #[arg(long)]
    pub batchnorm: bool,
    /// reconstruction weights used by the decoder-bearing modes
    #[arg(long, default_value_t = 0.5)]
    pub lrec: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lm: f64,
    /// convolution dropout rate for the dropout-conv mode
    #[arg(long, default_value_t = 0.5)]
    pub conv_dropout: f64,
    /// L1 activation weight for the l1 mode
    #[arg(long, default_value_t = 1e-4)]
    pub l1: f64,
    #[arg(long, value_enum, value_delimiter = ',',
          default_value = "swwae,dropout-conv,l1,unsup-sfx,unsup-pretr,noL2M")]
    pub modes: Vec<CompareMode>,
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub labels_grid: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    #[command(flatten)]
    pub optim: OptimOpts,
    #[command(flatten)]
    pub data: DataOpts,
    #[arg(long)]
    pub out: PathBuf,
}

struct Cell<'a> {
    train: &'a Dataset,
    labeled: &'a [bool],
    subset: &'a [usize],
    test: &'a Dataset,
    cfg: TrainConfig,
    seed: u64,
}

fn run_mode(cmd: &CompareCmd, mode: CompareMode, cell: &Cell) -> Result<f64> {
    let arch = parse_architecture(&cmd.arch)?;
    let (c, h, w) = cell.train.image_shape();
    let base = SwwaeConfig {
        pool_mode: cmd.pool.to_mode(cmd.beta),
        batchnorm: cmd.batchnorm,
        decoder_batchnorm: cmd.batchnorm,
        ..SwwaeConfig::default()
    };
    let (config, with_decoder, regime, modality) = match mode {
        CompareMode::Swwae => (
            SwwaeConfig {
                lambda_nll: 1.0,
                lambda_l2rec: cmd.lrec,
                lambda_l2m: cmd.lm,
                ..base
            },
            true,
            Regime::Joint,
            Modality::Semi,
        ),
        CompareMode::DropoutConv => (
            SwwaeConfig {
                lambda_nll: 1.0,
                conv_dropout: cmd.conv_dropout,
                ..base
            },
            false,
            Regime::Joint,
            Modality::Supervised,
        ),
        CompareMode::L1 => (
            SwwaeConfig {
                lambda_nll: 1.0,
                l1_weight: cmd.l1,
                ..base
            },
            false,
            Regime::Joint,
            Modality::Supervised,
        ),
        CompareMode::UnsupSfx | CompareMode::UnsupPretr => (
            SwwaeConfig {
                lambda_nll: 1.0,
                lambda_l2rec: cmd.lrec,
                lambda_l2m: cmd.lm,
                ..base
            },
            true,
            if mode == CompareMode::UnsupSfx {
                Regime::UnsupSfx
            } else {
                Regime::UnsupPretr
            },
            Modality::Semi,
        ),
        CompareMode::NoL2m => (
            SwwaeConfig {
                lambda_nll: 1.0,
                lambda_l2rec: cmd.lrec,
                lambda_l2m: 0.0,
                ..base
            },
            true,
            Regime::Joint,
            Modality::Semi,
        ),
    };

    let mut model =
        swwae_core::swwae::SwwaeModel::new(&arch, c, h, w, config, with_decoder, cell.seed)?;
    model.set_modality(modality);

    // supervised baselines see only the labeled samples
    let supervised_only = matches!(mode, CompareMode::DropoutConv | CompareMode::L1);
    if supervised_only {
        let subset_ds = cell.train.select(cell.subset)?;
        let all = vec![true; subset_ds.len()];
        train_run(&mut model, &subset_ds, &all, None, &cell.cfg, regime)?;
    } else {
        train_run(&mut model, cell.train, cell.labeled, None, &cell.cfg, regime)?;
    }
    Ok(evaluate(&mut model, cell.test)? * 100.0)
}

pub fn run(cmd: &CompareCmd) -> Result<u8> {
    let (train, test) = load_data(&cmd.data, cmd.optim.seed)?;
    let base_cfg = cmd.optim.to_config(15, 0);

    let mut entries = vec![
        ("arch", cmd.arch.clone()),
        ("pool", format!("{:?}", cmd.pool).to_lowercase()),
        ("beta", cmd.beta.to_string()),
        ("batchnorm", cmd.batchnorm.to_string()),
        ("lrec", cmd.lrec.to_string()),
        ("lm", cmd.lm.to_string()),
        ("conv_dropout", cmd.conv_dropout.to_string()),
        ("l1", cmd.l1.to_string()),
        (
            "modes",
            cmd.modes
                .iter()
                .map(|m| m.label())
                .collect::<Vec<_>>()
                .join(","),
        ),
        (
            "labels_grid",
            cmd.labels_grid
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("rounds", cmd.rounds.to_string()),
        ("epochs", base_cfg.epochs.to_string()),
        ("batch_size", base_cfg.batch_size.to_string()),
        ("lr", base_cfg.lr.to_string()),
        ("momentum", base_cfg.momentum.to_string()),
        ("seed", base_cfg.seed.to_string()),
    ];
    entries.extend(data_entries(&cmd.data, &train, &test));
    write_config(&cmd.out, "regularizer-compare", &entries)?;


    let mut errs = vec![vec![vec![f64::NAN; cmd.rounds]; cmd.labels_grid.len()]; cmd.modes.len()];
    for (n_idx, &n_labels) in cmd.labels_grid.iter().enumerate() {
        for round in 0..cmd.rounds {
            let round_seed = derive(derive(cmd.optim.seed, n_idx as u64), round as u64);
            let subset = sample_labeled_subset(&train, n_labels, round_seed)?;
            let labeled = subset.flags(train.len());
            let cell = Cell {
                train: &train,
                labeled: &labeled,
                subset: &subset.indices,
                test: &test,
                cfg: TrainConfig {
                    seed: round_seed,
                    ..base_cfg
                },
                seed: round_seed,
            };
            for (m_idx, &mode) in cmd.modes.iter().enumerate() {
                let err = run_mode(cmd, mode, &cell)?;
                errs[m_idx][n_idx][round] = err;
                println!(
                    "{} with {n_labels} labels, round {round}: error {err:.2}%",
                    mode.label()
                );
            }
        }
    }

    let mut rows = Vec::new();
    for (m_idx, &mode) in cmd.modes.iter().enumerate() {
        for (n_idx, &n_labels) in cmd.labels_grid.iter().enumerate() {
            let (mean, sd) = mean_sd(&errs[m_idx][n_idx]);
            rows.push(format!("{},{n_labels},{mean},{sd}", mode.label()));
        }
    }

    write_csv(
        &cmd.out.join("compare.csv"),
        "mode,n_labels,mean_err,sd_err",
        &rows,
    )?;
    Ok(0)
}
