//! Moment-lab runs driven by a flat TOML config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moment_lab::{
    mass_below, mass_unit_interval, simulate_moments, update_distributions, verify_first_moment, verify_second_moment,
    write_csv_outputs, CheckStatus, FirstMomentReport, GradientStream, MomentSimConfig, SecondMomentReport, StreamFamily,
    UpdateNumerator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamProfile {
    /// Every coordinate has the same `mean` and `std`.
    Constant,
    /// Two log-uniform magnitude populations (see `weak_*`, `strong_*`).
    TwoScale,
    /// [`GradientStream::snli_like`].
    SnliLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyName {
    Gaussian,
    StudentT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsConfig {
    pub dim: usize,
    pub steps: u64,
    pub snapshot_steps: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    /// Noise std `s`; if unset it is `noise_multiplier * clip_norm / batch_size`.
    pub noise_std: Option<f64>,
    pub noise_multiplier: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub profile: StreamProfile,
    pub family: FamilyName,
    pub dof: f64,
    pub mean: f64,
    pub std: f64,
    pub weak_fraction: f64,
    pub weak_min: f64,
    pub weak_max: f64,
    pub strong_min: f64,
    pub strong_max: f64,
    pub rel_std: f64,
    pub trials: usize,
    pub seed: u64,
    pub gamma_prime: f64,
    pub numerator: UpdateNumerator,
    /// Absolute tolerance of the first-moment check; defaults to `0.01 * s`.
    pub first_moment_tol: Option<f64>,
    pub second_moment_rel_tol: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self {
            dim: 1000,
            steps: 20_000,
            snapshot_steps: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            noise_std: None,
            noise_multiplier: 0.4,
            clip_norm: 0.1,
            batch_size: 256,
            profile: StreamProfile::SnliLike,
            family: FamilyName::Gaussian,
            dof: 5.0,
            mean: 0.0,
            std: 0.0,
            weak_fraction: 0.4,
            weak_min: 3e-6,
            weak_max: 1.5e-5,
            strong_min: 3e-5,
            strong_max: 1.2e-4,
            rel_std: 0.5,
            trials: 4,
            seed: 0,
            gamma_prime: 1e-9,
            numerator: UpdateNumerator::Clean,
            first_moment_tol: None,
            second_moment_rel_tol: 0.02,
            output_dir: None,
        }
    }
}

impl MomentsConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
            .unwrap_or(self.noise_multiplier * self.clip_norm / self.batch_size.max(1) as f64)
    }

    pub fn stream(&self) -> GradientStream {
        let mut s = match self.profile {
            StreamProfile::Constant => GradientStream::constant(self.dim, self.mean, self.std),
            StreamProfile::TwoScale => GradientStream::two_scale(
                self.dim,
                self.seed,
                self.weak_fraction,
                (self.weak_min, self.weak_max),
                (self.strong_min, self.strong_max),
                self.rel_std,
            ),
            StreamProfile::SnliLike => GradientStream::snli_like(self.dim, self.seed),
        };
        if self.family == FamilyName::StudentT {
            s.family = StreamFamily::StudentT { dof: self.dof };
        }
        s
    }

    pub fn sim_config(&self) -> MomentSimConfig {
        MomentSimConfig {
            dim: self.dim,
            steps: self.steps,
            snapshot_steps: self.snapshot_steps.clone(),
            beta1: self.beta1,
            beta2: self.beta2,
            noise_std: self.noise_std(),
            stream: self.stream(),
            trials: self.trials,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsReport {
    pub noise_std: f64,
    pub phi: f64,
    pub first_moment: Vec<FirstMomentReport>,
    pub second_moment: Vec<SecondMomentReport>,
    pub median_v_clean: f64,
    pub median_v_private: f64,
    pub median_v_corrected: f64,
    pub mass_below_005_biased: f64,
    pub mass_below_005_corrected: f64,
    pub mass_unit_clean: f64,
    pub mass_unit_corrected: f64,
    pub files: Vec<String>,
}

impl MomentsReport {
    pub fn passed(&self) -> bool {
        self.first_moment.iter().all(|r| r.status == CheckStatus::Pass)
            && self.second_moment.iter().all(|r| r.status == CheckStatus::Pass)
    }

    pub fn to_text(&self) -> String {
        let tag = |s: CheckStatus| match s {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Underpowered => "UNDERPOWERED",
        };
        let mut s = String::new();
        writeln!(s, "noise_std {:e}", self.noise_std).unwrap();
        writeln!(s, "phi {:.5e}", self.phi).unwrap();
        for r in &self.first_moment {
            writeln!(
                s,
                "{} first-moment t={} diff={:e} se={:e} within_3se={:.4}",
                tag(r.status),
                r.step,
                r.difference,
                r.standard_error,
                r.fraction_within_3se
            )
            .unwrap();
        }
        for r in &self.second_moment {
            writeln!(
                s,
                "{} second-moment t={} shift={:e} phi={:e} rel_err={:.4} se={:e}",
                tag(r.status),
                r.step,
                r.shift,
                r.phi,
                r.relative_error,
                r.standard_error
            )
            .unwrap();
        }
        writeln!(
            s,
            "median v_clean {:e} v_private {:e} v_corrected {:e}",
            self.median_v_clean, self.median_v_private, self.median_v_corrected
        )
        .unwrap();
        writeln!(
            s,
            "mass |update|<0.05 biased {:.4} corrected {:.4}; mass in [-1,1] clean {:.4} corrected {:.4}",
            self.mass_below_005_biased, self.mass_below_005_corrected, self.mass_unit_clean, self.mass_unit_corrected
        )
        .unwrap();
        writeln!(s, "overall {}", if self.passed() { "PASS" } else { "FAIL" }).unwrap();
        s
    }
}

/// Simulates, checks both moment equations at every snapshot, and writes
/// the CSVs plus `report.txt` and `report.json` into `dir`.
pub fn run_moments(cfg: &MomentsConfig, dir: &Path) -> Result<MomentsReport> {
    let sim = cfg.sim_config();
    let trace = simulate_moments(&sim)?;
    let s = sim.noise_std;
    let tol = cfg.first_moment_tol.unwrap_or(if s > 0.0 { 0.01 * s } else { 1e-12 });
    let mut first = Vec::new();
    let mut second = Vec::new();
    for snap in &trace.snapshots {
        first.push(verify_first_moment(&trace, snap.step, tol)?);
        second.push(verify_second_moment(&trace, &sim, snap.step, cfg.second_moment_rel_tol)?);
    }
    let dists = update_distributions(&trace, &sim, cfg.gamma_prime, cfg.numerator)?;
    let mut files = write_csv_outputs(dir, &trace, &dists)?;
    let report = MomentsReport {
        noise_std: s,
        phi: dists.phi,
        first_moment: first,
        second_moment: second,
        median_v_clean: dists.stats_v_clean.median,
        median_v_private: dists.stats_v_private.median,
        median_v_corrected: dists.stats_v_corrected.median,
        mass_below_005_biased: mass_below(&dists.biased, 0.05),
        mass_below_005_corrected: mass_below(&dists.corrected, 0.05),
        mass_unit_clean: mass_unit_interval(&dists.clean),
        mass_unit_corrected: mass_unit_interval(&dists.corrected),
        files: {
            files.extend(["report.txt".to_string(), "report.json".to_string(), "moments.resolved".to_string()]);
            files
        },
    };
    let put = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    put("report.txt", report.to_text())?;
    put("report.json", serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    put("moments.resolved", toml::to_string(cfg).expect("config serializes"))?;
    Ok(report)
}
