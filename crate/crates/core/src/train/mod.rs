//! Optimization, batch scheduling, the training loop with its two-phase
//! regimes, evaluation, and the finite-difference gradient-check harness.

mod gradcheck;
mod runner;
mod schedule;
mod sgd;

pub use gradcheck::{gradient_check, standard_battery, GradReport};
pub use runner::{evaluate, train_run, write_history_csv, EpochStats, Regime, TrainConfig};
pub use schedule::{make_batches, Batch, BatchSchedule};
pub use sgd::Sgd;
