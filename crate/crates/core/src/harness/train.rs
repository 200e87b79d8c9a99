//! The DP training loop: sample, per-example gradients, privatize, step.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Sampling, TaskKind, TrainMode};
use super::dataset::load_csv;
use super::runlog::{write_runlog, RunRecord};
use crate::accountant::{max_steps, subsampled_gaussian_curve, BudgetStatus, RdpLedger};
use crate::error::{Error, Result};
use crate::models::{make_synthetic, Dataset, Model, ModelKind, SyntheticSpec, SyntheticTask};
use crate::numerics::{self, stream_id, stream_rng, streams, ParamVector};
use crate::optimizers::{adam_step, phi_hat, sgd_step, OptimizerState};
use crate::privatizer::{privatize, PrivacyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    /// Not even one step fits in the privacy budget.
    BudgetExhausted,
    NumericAbort { step: u64, reason: String },
}

/// Per-step internals kept when `diagnostics` is on. Never written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: u64,
    pub batch_indices: Vec<usize>,
    pub m_hat: Option<ParamVector>,
    pub v_hat: Option<ParamVector>,
    /// Value subtracted from `v_hat` in the corrected update.
    pub subtract: Option<f64>,
    pub theta_before: ParamVector,
    pub theta_after: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub records: Vec<RunRecord>,
    pub planned_steps: u64,
    pub theta: ParamVector,
    /// Final privacy ledger; `None` for non-private runs and `sigma = 0`.
    pub ledger: Option<RdpLedger>,
    pub privacy: PrivacyConfig,
    pub train_size: usize,
    pub trace: Vec<StepTrace>,
}

impl RunOutcome {
    /// Held-out accuracy of the last record, or 0 if the run produced none
    /// or aborted.
    pub fn final_accuracy(&self) -> f64 {
        if matches!(self.status, RunStatus::NumericAbort { .. }) {
            return 0.0;
        }
        self.records.last().and_then(|r| r.eval_accuracy).unwrap_or(0.0)
    }
}

/// Builds the dataset and splits it into (train, eval).
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let data = match cfg.task {
        TaskKind::Csv => load_csv(cfg.csv_path.as_deref().expect("validated"))?,
        TaskKind::SyntheticClassification | TaskKind::SyntheticRegression => {
            let task = if cfg.task == TaskKind::SyntheticRegression {
                SyntheticTask::Regression
            } else {
                SyntheticTask::Classification { n_classes: cfg.n_classes }
            };
            make_synthetic(&SyntheticSpec {
                task,
                n: cfg.n,
                d: cfg.d,
                seed: cfg.data_seed(),
                noise: cfg.label_noise,
                margin: cfg.margin,
                feature_decades: cfg.feature_decades,
            })?
        }
    };
    data.split(cfg.held_out_fraction, cfg.data_seed())
}

pub fn build_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<Model> {
    let d = data.n_features();
    match (cfg.model, data.n_classes()) {
        (ModelKind::LinearRegression, None) => Model::linear_regression(d),
        (ModelKind::LogisticRegression, Some(k)) => Model::logistic_regression(d, k),
        (ModelKind::Mlp, Some(k)) => Model::mlp(d, cfg.hidden, k),
        _ => Err(Error::Config(format!("model {:?} does not match the dataset's labels", cfg.model))),
    }
}

pub fn privacy_config(cfg: &ExperimentConfig, train_size: usize) -> Result<PrivacyConfig> {
    let p = PrivacyConfig {
        clip_norm: cfg.clip_norm,
        noise_multiplier: cfg.noise_multiplier,
        batch_size: cfg.batch_size,
        dataset_size: train_size,
        delta: cfg.delta,
        target_epsilon: cfg.target_epsilon,
    };
    p.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(p)
}

/// Batch indices for `step`, ascending. Depends only on `(seed, step)` and the
/// sampling parameters, never on the model state.
pub fn sample_batch(sampling: Sampling, n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, stream_id(streams::BATCH, step));
    match sampling {
        Sampling::Poisson => {
            let q = batch_size as f64 / n as f64;
            (0..n).filter(|_| rng.random::<f64>() < q).collect()
        }
        Sampling::Fixed => {
            let mut idx = index::sample(&mut rng, n, batch_size).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

struct Evaluator<'a> {
    model: &'a Model,
    train: &'a Dataset,
    eval: &'a Dataset,
}

impl Evaluator<'_> {
    fn finite(x: f64) -> Option<f64> {
        x.is_finite().then_some(x)
    }

    fn losses(&self, theta: &ParamVector) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
        let train_loss = Self::finite(self.model.full_loss(theta, self.train)?);
        if self.eval.is_empty() {
            return Ok((train_loss, None, None));
        }
        let eval_loss = Self::finite(self.model.full_loss(theta, self.eval)?);
        let acc = if self.model.is_classifier() {
            Some(self.model.accuracy(theta, self.eval)?)
        } else {
            None
        };
        Ok((train_loss, eval_loss, acc))
    }
}

/// Runs one experiment in memory.
pub fn run_train(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, eval) = prepare_data(cfg)?;
    let model = build_model(cfg, &train)?;
    let privacy = privacy_config(cfg, train.len())?;
    let accounted = cfg.mode.is_private() && privacy.noise_multiplier > 0.0;
    let ledger0 = RdpLedger::default();
    let curve = if accounted {
        Some(subsampled_gaussian_curve(ledger0.orders(), privacy.noise_multiplier, privacy.sampling_rate())?)
    } else {
        None
    };
    let theta0 = model.init_params(cfg.seed, cfg.init_scale)?;
    let mut outcome = RunOutcome {
        status: RunStatus::Completed,
        records: Vec::new(),
        planned_steps: 0,
        theta: theta0.clone(),
        ledger: curve.as_ref().map(|_| ledger0.clone()),
        privacy,
        train_size: train.len(),
        trace: Vec::new(),
    };

    let budget = if accounted { Some(max_steps(&privacy)?) } else { None };
    if budget.is_some_and(|b| b.status == BudgetStatus::Exhausted) {
        outcome.status = RunStatus::BudgetExhausted;
        return Ok(outcome);
    }
    let planned = match (cfg.steps, budget) {
        (Some(t), _) => t,
        (None, Some(b)) => b.steps,
        (None, None) => unreachable!("validated: auto budget needs accounting"),
    };
    outcome.planned_steps = planned;

    let adam = cfg.mode.adam_mode().map(|m| cfg.adam_config(m));
    let subtract = (cfg.mode == TrainMode::AdamCorrected).then(|| cfg.phi_prime.unwrap_or_else(|| phi_hat(&privacy)));
    let dim = model.param_dim();
    let evaluator = Evaluator {
        model: &model,
        train: &train,
        eval: &eval,
    };
    let started = Instant::now();
    let mut state = OptimizerState::new(theta0);
    let epsilon_at = |t: u64| -> Result<Option<f64>> {
        match &curve {
            Some(c) => Ok(Some(ledger0.compose(c, t)?.to_epsilon(privacy.delta)?.epsilon)),
            None => Ok(None),
        }
    };

    for t in 1..=planned {
        let idx = sample_batch(cfg.sampling, train.len(), cfg.batch_size, cfg.seed, t);
        let theta_before = cfg.diagnostics.then(|| state.theta.clone());
        let step_result = (|| -> Result<(u64, Option<(ParamVector, ParamVector)>)> {
            let batch = model.per_example_grads(&state.theta, &train, &idx)?;
            let g = if cfg.mode.is_private() {
                privatize(&batch, dim, &privacy, cfg.seed, t)?.g_tilde
            } else {
                batch.mean().unwrap_or_else(|| ParamVector::zeros(dim))
            };
            match &adam {
                None => {
                    sgd_step(&mut state, &g, cfg.lr)?;
                    Ok((0, None))
                }
                Some(a) => {
                    let u = adam_step(&mut state, &g, a, &privacy, subtract)?;
                    Ok((u.floored_count as u64, Some((u.m_hat, u.v_hat))))
                }
            }
        })();
        let (floored, moments) = match step_result {
            Ok(r) => r,
            Err(e) if is_numeric(&e) => {
                let (train_loss, eval_loss, eval_accuracy) = evaluator.losses(&state.theta).unwrap_or((None, None, None));
                outcome.records.push(RunRecord {
                    step: t,
                    train_loss,
                    eval_loss,
                    eval_accuracy,
                    epsilon: epsilon_at(t)?,
                    floored_count: 0,
                    wall_clock_s: cfg.log_wall_clock.then(|| started.elapsed().as_secs_f64()),
                    abort: Some(e.to_string()),
                });
                outcome.status = RunStatus::NumericAbort {
                    step: t,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(before) = theta_before {
            let (m_hat, v_hat) = moments.unzip();
            outcome.trace.push(StepTrace {
                step: t,
                batch_indices: idx,
                m_hat,
                v_hat,
                subtract,
                theta_before: before,
                theta_after: state.theta.clone(),
            });
        }
        if t % cfg.eval_interval == 0 || t == planned {
            let (train_loss, eval_loss, eval_accuracy) = evaluator.losses(&state.theta)?;
            let abort = train_loss.is_none().then(|| "non-finite training loss".to_string());
            outcome.records.push(RunRecord {
                step: t,
                train_loss,
                eval_loss,
                eval_accuracy,
                epsilon: epsilon_at(t)?,
                floored_count: floored,
                wall_clock_s: cfg.log_wall_clock.then(|| started.elapsed().as_secs_f64()),
                abort: abort.clone(),
            });
            if let Some(reason) = abort {
                outcome.status = RunStatus::NumericAbort { step: t, reason };
                break;
            }
        }
    }
    if let (Some(c), Some(l)) = (&curve, outcome.ledger.as_mut()) {
        *l = ledger0.compose(c, state.t)?;
    }
    outcome.theta = state.theta;
    Ok(outcome)
}

/// Header comment of `config.resolved`: values derived at run time.
fn resolved_header(cfg: &ExperimentConfig, outcome: &RunOutcome) -> String {
    let p = &outcome.privacy;
    format!(
        "# train_size = {}\n# sampling_rate = {}\n# noise_std = {}\n# phi_hat = {}\n# planned_steps = {}\n# rng = {}\n# quantiles = {}\n# mlp_activation = tanh\n",
        outcome.train_size,
        p.sampling_rate(),
        p.noise_std(),
        phi_hat(p),
        outcome.planned_steps,
        numerics::RNG_ALGORITHM,
        numerics::QUANTILE_METHOD,
    ) + &format!("# data_seed = {}\n", cfg.data_seed())
}

/// Writes `config.resolved`, `runlog.jsonl` and (for accounted runs)
/// `ledger.txt` into `dir`.
pub fn write_run_outputs(cfg: &ExperimentConfig, outcome: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let resolved = dir.join("config.resolved");
    fs::write(&resolved, resolved_header(cfg, outcome) + &cfg.to_toml()).map_err(|e| Error::io(&resolved, e))?;
    written.push(resolved);
    let log = dir.join("runlog.jsonl");
    write_runlog(&outcome.records, &log)?;
    written.push(log);
    if let Some(l) = &outcome.ledger {
        let path = dir.join("ledger.txt");
        l.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// [`run_train`] followed by [`write_run_outputs`].
pub fn run_train_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    let outcome = run_train(cfg)?;
    write_run_outputs(cfg, &outcome, dir)?;
    Ok(outcome)
}
