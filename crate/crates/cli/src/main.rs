//! Command-line experiments for the stacked what-where auto-encoder.
//!
//! Each subcommand trains models and emits CSV / PGM / checkpoint artifacts
//! into `--out`; every output directory gets a `config.txt` echoing the fully
//! resolved configuration, and identical flags + seed produce byte-identical
//! CSV files.
//!
//! Exit codes: 0 success, 1 failed run or failed check, 2 usage error.

mod capsule;
mod common;
mod compare;
mod gradcheck;
mod sweep;
mod train;
mod unpool;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use swwae_core::pooling::PoolMode;
use swwae_core::swwae::Modality;
use swwae_core::train::{Regime, TrainConfig};

#[derive(Parser)]
#[command(name = "swwae", version, about = "What-where auto-encoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write history.csv + model.ckpt
    Train(train::TrainCmd),
    /// Sweep pool sizes; compare unpooling against where-free upsampling
    UnpoolVsUpsample(unpool::UnpoolCmd),
    /// Probe what/where behaviour under input translation
    Capsule(capsule::CapsuleCmd),
    /// Sweep the reconstruction weight over labeled-subset sizes
    LambdaSweep(sweep::SweepCmd),
    /// Compare regularizers and disjoint training baselines
    RegularizerCompare(compare::CompareCmd),
    /// Verify every analytic gradient against finite differences
    Gradcheck(gradcheck::GradcheckCmd),
}

/// Pooling flavour selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    Hard,
    Soft,
}

impl PoolArg {
    pub fn to_mode(self, beta: f64) -> PoolMode {
        match self {
            PoolArg::Hard => PoolMode::Hard,
            PoolArg::Soft => PoolMode::Soft { beta },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Supervised,
    Unsupervised,
    Semi,
}

impl ModeArg {
    pub fn to_modality(self) -> Modality {
        match self {
            ModeArg::Supervised => Modality::Supervised,
            ModeArg::Unsupervised => Modality::Unsupervised,
            ModeArg::Semi => Modality::Semi,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    /// single phase, all loss terms joint
    Joint,
    /// unsupervised phase, then a classifier trained on the frozen encoder
    UnsupSfx,
    /// unsupervised phase, then supervised fine-tuning of the whole convnet
    UnsupPretr,
}

impl RegimeArg {
    pub fn to_regime(self) -> Regime {
        match self {
            RegimeArg::Joint => Regime::Joint,
            RegimeArg::UnsupSfx => Regime::UnsupSfx,
            RegimeArg::UnsupPretr => Regime::UnsupPretr,
        }
    }
}

/// Data source flags shared by every experiment. IDX files are used when
/// given; otherwise a seeded synthetic ten-class digit set is generated.
#[derive(Args, Debug)]
pub struct DataOpts {
    /// IDX image file for training (synthetic digits when omitted)
    #[arg(long, value_name = "FILE")]
    pub train_images: Option<PathBuf>,
    /// IDX label file for training
    #[arg(long, value_name = "FILE")]
    pub train_labels: Option<PathBuf>,
    /// IDX image file for evaluation
    #[arg(long, value_name = "FILE")]
    pub test_images: Option<PathBuf>,
    /// IDX label file for evaluation
    #[arg(long, value_name = "FILE")]
    pub test_labels: Option<PathBuf>,
    /// training samples (default 2000, or 60000 with --paper-scale)
    #[arg(long)]
    pub train_size: Option<usize>,
    /// evaluation samples (default 500, or 10000 with --paper-scale)
    #[arg(long)]
    pub test_size: Option<usize>,
    /// lift desk-scale subset defaults to full-dataset sizes
    #[arg(long)]
    pub paper_scale: bool,
    /// synthetic digits: glyph position jitter in pixels per axis
    #[arg(long, default_value_t = 2)]
    pub jitter: usize,
    /// synthetic digits: additive per-pixel noise amplitude
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// keep raw [0,1] pixels instead of subtracting the per-dataset mean
    /// (translation probes want zero-fill to match the background)
    #[arg(long)]
    pub raw: bool,
}

/// Optimizer flags shared by every training command. `epochs` and `augment`
/// have per-command defaults, so they resolve through `to_config`.
#[derive(Args, Debug)]
pub struct OptimOpts {
    /// training epochs per phase
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// random-translation augmentation amplitude in pixels
    #[arg(long)]
    pub augment: Option<usize>,
}

impl OptimOpts {
    pub fn to_config(&self, default_epochs: usize, default_augment: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.unwrap_or(default_epochs),
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            seed: self.seed,
            augment: self.augment.unwrap_or(default_augment),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(cmd) => train::run(&cmd),
        Command::UnpoolVsUpsample(cmd) => unpool::run(&cmd),
        Command::Capsule(cmd) => capsule::run(&cmd),
        Command::LambdaSweep(cmd) => sweep::run(&cmd),
        Command::RegularizerCompare(cmd) => compare::run(&cmd),
        Command::Gradcheck(cmd) => gradcheck::run(&cmd),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
