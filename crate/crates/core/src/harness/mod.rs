//! Experiment harness: config files, the DP training loop, sweeps, moment-lab
//! runs, CSV ingestion and run logs.
//!
//! A training run writes `config.resolved` (the fully resolved config, with
//! derived values as leading comments), `runlog.jsonl` and, when privacy is
//! accounted, `ledger.txt`.

pub mod config;
pub mod dataset;
pub mod moments;
pub mod runlog;
pub mod sweep;
pub mod train;

pub use config::{ExperimentConfig, Sampling, TaskKind, TrainMode};
pub use dataset::{load_csv, load_csv_with, CsvLabels};
pub use moments::{run_moments, MomentsConfig, MomentsReport};
pub use runlog::{read_runlog, write_runlog, RunRecord};
pub use sweep::{final_accuracies, run_sweep, sweep_child, tune_lr, LrTuning, SweepAxis, SweepChild, COARSE_LR_GRID};
pub use train::{run_train, run_train_to_dir, write_run_outputs, RunOutcome, RunStatus};
