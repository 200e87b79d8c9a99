//! One-axis sweeps and coarse learning-rate tuning.
//!
//! Children of a sweep share the base seed, so their batch, noise and
//! initialization streams coincide and only the swept value differs.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, TrainMode};
use super::train::{run_train, write_run_outputs, RunOutcome};
use crate::error::{Error, Result};
use crate::numerics::median;
use crate::optimizers::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Value subtracted from `v_hat` (corrected mode).
    PhiPrime,
    /// Floor inside the root (corrected mode).
    GammaPrime,
    /// Constant outside the root (standard and biased modes).
    Gamma,
    /// `beta1`, with `beta2` coupled through `(1 - beta1) = sqrt(1 - beta2)`.
    Beta,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "phi_prime" => Ok(Self::PhiPrime),
            "gamma_prime" => Ok(Self::GammaPrime),
            "gamma" => Ok(Self::Gamma),
            "beta" => Ok(Self::Beta),
            _ => Err(Error::invalid(format!("unknown sweep axis `{s}`"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::PhiPrime => "phi_prime",
            Self::GammaPrime => "gamma_prime",
            Self::Gamma => "gamma",
            Self::Beta => "beta",
        }
    }
}

/// The child configuration for one swept value.
pub fn sweep_child(base: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mode = base.mode;
    let needs = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("sweep axis {} needs {what}, got mode {mode:?}", axis.name())))
        }
    };
    let mut child = base.clone();
    match axis {
        SweepAxis::PhiPrime => {
            needs(mode == TrainMode::AdamCorrected, "adam-corrected")?;
            child.phi_prime = Some(value);
        }
        SweepAxis::GammaPrime => {
            needs(mode == TrainMode::AdamCorrected, "adam-corrected")?;
            child.gamma_prime = value;
        }
        SweepAxis::Gamma => {
            needs(matches!(mode, TrainMode::Adam | TrainMode::AdamBiased), "adam or adam-biased")?;
            child.gamma = value;
        }
        SweepAxis::Beta => {
            needs(mode != TrainMode::Sgd, "an adam mode")?;
            child.beta1 = value;
            child.beta2 = AdamConfig::coupled_beta2(value);
        }
    }
    child.validate()?;
    Ok(child)
}

#[derive(Debug, Clone)]
pub struct SweepChild {
    pub value: f64,
    pub config: ExperimentConfig,
    pub outcome: RunOutcome,
}

/// Runs one child per value, in parallel, returned in `values` order.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepChild>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let configs: Vec<ExperimentConfig> = values.iter().map(|&v| sweep_child(base, axis, v)).collect::<Result<_>>()?;
    configs
        .into_par_iter()
        .zip(values.par_iter())
        .map(|(config, &value)| {
            let outcome = run_train(&config)?;
            Ok(SweepChild { value, config, outcome })
        })
        .collect()
}

/// Writes each child under `dir/<axis>_<index>/` plus a `sweep.csv` index.
pub fn write_sweep_outputs(dir: &Path, axis: SweepAxis, children: &[SweepChild]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("child,axis,value,status,final_accuracy,final_train_loss\n");
    for (i, c) in children.iter().enumerate() {
        let name = format!("{}_{i}", axis.name());
        write_run_outputs(&c.config, &c.outcome, &dir.join(&name))?;
        let last = c.outcome.records.last();
        index.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            axis.name(),
            c.value,
            status_name(&c.outcome),
            last.and_then(|r| r.eval_accuracy).map(|x| x.to_string()).unwrap_or_default(),
            last.and_then(|r| r.train_loss).map(|x| x.to_string()).unwrap_or_default(),
        ));
    }
    let path = dir.join("sweep.csv");
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

fn status_name(o: &RunOutcome) -> &'static str {
    match o.status {
        super::train::RunStatus::Completed => "completed",
        super::train::RunStatus::BudgetExhausted => "budget-exhausted",
        super::train::RunStatus::NumericAbort { .. } => "numeric-abort",
    }
}

/// Logarithmic learning-rate grid used for coarse tuning.
pub const COARSE_LR_GRID: [f64; 7] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

/// Final held-out accuracies of `cfg` under each seed (data, batches, noise
/// and initialization all follow the seed).
pub fn final_accuracies(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .par_iter()
        .map(|&s| {
            let c = ExperimentConfig {
                seed: s,
                data_seed: None,
                ..cfg.clone()
            };
            Ok(run_train(&c)?.final_accuracy())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrTuning {
    pub grid: Vec<f64>,
    /// Median final accuracy over seeds, one per grid value.
    pub medians: Vec<f64>,
    pub best_lr: f64,
    pub best_median: f64,
    /// Per-seed accuracies at `best_lr`.
    pub best_accuracies: Vec<f64>,
}

/// Picks the learning rate with the best median final accuracy over `seeds`;
/// ties go to the smaller rate.
pub fn tune_lr(base: &ExperimentConfig, grid: &[f64], seeds: &[u64]) -> Result<LrTuning> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("learning-rate tuning needs a grid and seeds"));
    }
    let per_lr: Vec<Vec<f64>> = grid
        .iter()
        .map(|&lr| final_accuracies(&ExperimentConfig { lr, ..base.clone() }, seeds))
        .collect::<Result<_>>()?;
    let medians: Vec<f64> = per_lr.iter().map(|a| median(a)).collect();
    let mut best = 0;
    for (i, &m) in medians.iter().enumerate() {
        if m > medians[best] {
            best = i;
        }
    }
    Ok(LrTuning {
        grid: grid.to_vec(),
        best_lr: grid[best],
        best_median: medians[best],
        best_accuracies: per_lr[best].clone(),
        medians,
    })
}
