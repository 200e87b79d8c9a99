//! Experiment configuration: a flat TOML file plus `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::optimizers::{AdamConfig, AdamMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SyntheticClassification,
    SyntheticRegression,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// DP-SGD on the privatized gradient.
    #[serde(alias = "dp-sgd")]
    Sgd,
    /// Non-private Adam on the plain batch mean.
    Adam,
    /// Standard Adam on the privatized gradient.
    #[serde(alias = "dp-biased")]
    AdamBiased,
    /// Adam with `(sigma C / B)^2` subtracted from `v_hat`.
    #[serde(alias = "dp-corrected")]
    AdamCorrected,
}

impl TrainMode {
    pub fn is_private(self) -> bool {
        self != TrainMode::Adam
    }

    pub fn adam_mode(self) -> Option<AdamMode> {
        match self {
            TrainMode::Sgd => None,
            TrainMode::Adam => Some(AdamMode::Standard),
            TrainMode::AdamBiased => Some(AdamMode::DpBiased),
            TrainMode::AdamCorrected => Some(AdamMode::DpCorrected),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Each example joins the batch independently with probability `B / N`.
    Poisson,
    /// Exactly `B` examples drawn without replacement.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub csv_path: Option<PathBuf>,
    pub n: usize,
    pub d: usize,
    pub n_classes: usize,
    pub label_noise: f64,
    pub margin: f64,
    pub feature_decades: f64,
    /// Seed for data generation and the train/eval split; defaults to `seed`.
    pub data_seed: Option<u64>,
    pub held_out_fraction: f64,

    pub model: ModelKind,
    pub hidden: usize,
    pub init_scale: f64,

    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub batch_size: usize,
    pub delta: f64,
    pub target_epsilon: f64,
    pub sampling: Sampling,

    pub mode: TrainMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    /// Replaces `(sigma C / B)^2` in the corrected update.
    pub phi_prime: Option<f64>,

    pub steps: Option<u64>,
    pub auto_budget: bool,
    pub eval_interval: u64,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub log_wall_clock: bool,
    /// Keep per-step moment estimates and batch indices in memory.
    pub diagnostics: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::SyntheticClassification,
            csv_path: None,
            n: 10_000,
            d: 20,
            n_classes: 2,
            label_noise: 0.0,
            margin: 0.1,
            feature_decades: 0.0,
            data_seed: None,
            held_out_fraction: 0.2,
            model: ModelKind::LogisticRegression,
            hidden: 16,
            init_scale: 0.0,
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            batch_size: 256,
            delta: 1e-5,
            target_epsilon: 7.0,
            sampling: Sampling::Poisson,
            mode: TrainMode::AdamCorrected,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            gamma: 1e-8,
            gamma_prime: 1e-8,
            phi_prime: None,
            steps: None,
            auto_budget: false,
            eval_interval: 100,
            seed: 0,
            output_dir: None,
            log_wall_clock: false,
            diagnostics: false,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string().trim_end().to_string())
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(text.parse::<toml::Table>().map_err(config_err)?, &[])
    }

    /// Reads `path` and applies `overrides` (`key`, `value`) on top.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_end())))?;
        Self::from_table(table, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_table(mut table: toml::Table, overrides: &[(String, String)]) -> Result<Self> {
        for (k, v) in overrides {
            table.insert(k.clone(), override_value(v));
        }
        let cfg: Self = table.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let table = toml::Table::try_from(self).map_err(config_err)?;
        Self::from_table(table, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match (self.steps, self.auto_budget) {
            (Some(_), true) => return bad("set either `steps` or `auto_budget = true`, not both"),
            (None, false) => return bad("one of `steps` or `auto_budget = true` is required"),
            (Some(0), _) => return bad("`steps` must be >= 1"),
            _ => {}
        }
        if self.auto_budget && (!self.mode.is_private() || self.noise_multiplier == 0.0) {
            return bad("`auto_budget` needs a private mode with noise_multiplier > 0");
        }
        if let Some(p) = self.phi_prime {
            if self.mode != TrainMode::AdamCorrected {
                return bad("`phi_prime` is only valid with mode = adam-corrected");
            }
            if !(p >= 0.0) || !p.is_finite() {
                return bad("`phi_prime` must be finite and >= 0");
            }
        }
        if self.eval_interval == 0 {
            return bad("`eval_interval` must be >= 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("`lr` must be finite and > 0");
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return bad("`held_out_fraction` must lie in [0, 1)");
        }
        if self.task == TaskKind::Csv && self.csv_path.is_none() {
            return bad("task = csv needs `csv_path`");
        }
        let regression = self.task == TaskKind::SyntheticRegression;
        if self.task != TaskKind::Csv && regression != (self.model == ModelKind::LinearRegression) {
            return bad("linear-regression pairs with synthetic-regression; classifiers with synthetic-classification");
        }
        if let Some(mode) = self.mode.adam_mode() {
            self.adam_config(mode).validate().map_err(config_err)?;
        }
        Ok(())
    }

    pub fn adam_config(&self, mode: AdamMode) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            lr: self.lr,
            gamma: self.gamma,
            gamma_prime: self.gamma_prime,
            mode,
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
