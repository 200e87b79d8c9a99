use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpadam_core::accountant::{max_steps, subsampled_gaussian_curve, BudgetStatus, RdpLedger};
use dpadam_core::harness::{
    self, runlog, sweep, train, ExperimentConfig, MomentsConfig, RunOutcome, RunStatus, SweepAxis,
};
use dpadam_core::optimizers::phi_hat;
use dpadam_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_CHECKS: u8 = 5;

#[derive(Parser)]
#[command(name = "dpadam", version, about = "DP-SGD and DP-Adam experiments with Renyi-DP accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write config.resolved, runlog.jsonl and ledger.txt.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one child per value of a hyperparameter axis.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// phi_prime, gamma_prime, gamma or beta (beta sets beta1, beta2 coupled).
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Read phi_prime values as multiples of (sigma C / B)^2.
        #[arg(long)]
        relative: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo moment study; writes CSVs and a pass/fail report.
    Moments {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the step budget and the epsilon schedule of a config.
    Account {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Number of schedule points to print.
        #[arg(long, default_value_t = 10)]
        points: u64,
    },
    /// Flatten run logs under a directory into one CSV.
    Plotdata {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Flat TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// sgd, adam, adam-biased or adam-corrected.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    phi_prime: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Train for the largest step count that fits the privacy budget.
    #[arg(long, conflicts_with = "steps")]
    auto_budget: bool,
}

enum Failure {
    Core(Error),
    Exit(u8, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult = Result<(), Failure>;

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut table = match &self.config {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::Io { path: p.clone(), source: e })?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.to_string().trim_end())))?,
            None => toml::Table::new(),
        };
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        if let Some(m) = &self.mode {
            overrides.push(("mode".into(), format!("{m:?}")));
        }
        if let Some(p) = self.phi_prime {
            overrides.push(("phi_prime".into(), format!("{p:e}")));
        }
        if let Some(t) = self.steps {
            table.remove("auto_budget");
            overrides.push(("steps".into(), t.to_string()));
        }
        if self.auto_budget {
            table.remove("steps");
            overrides.push(("auto_budget".into(), "true".into()));
        }
        ExperimentConfig::from_table(table, &overrides)
    }
}

fn report_outcome(o: &RunOutcome) -> CliResult {
    let last = o.records.last();
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6}"));
    println!(
        "steps {} / {}  train_loss {}  eval_accuracy {}  epsilon {}",
        last.map_or(0, |r| r.step),
        o.planned_steps,
        fmt(last.and_then(|r| r.train_loss)),
        fmt(last.and_then(|r| r.eval_accuracy)),
        fmt(last.and_then(|r| r.epsilon)),
    );
    match &o.status {
        RunStatus::Completed => Ok(()),
        RunStatus::BudgetExhausted => Err(Failure::Exit(EXIT_BUDGET, "privacy budget exhausted before the first step".into())),
        RunStatus::NumericAbort { step, reason } => Err(Failure::Exit(EXIT_NUMERIC, format!("numeric abort at step {step}: {reason}"))),
    }
}

fn cmd_train(exp: &ExperimentArgs, out: Option<PathBuf>) -> CliResult {
    let cfg = exp.resolve()?;
    let outcome = harness::run_train(&cfg)?;
    if let Some(dir) = out.or_else(|| cfg.output_dir.clone()) {
        train::write_run_outputs(&cfg, &outcome, &dir)?;
        println!("wrote {}", dir.display());
    }
    report_outcome(&outcome)
}

fn cmd_sweep(exp: &ExperimentArgs, axis: &str, values: &[f64], relative: bool, out: Option<PathBuf>) -> CliResult {
    let cfg = exp.resolve()?;
    let axis: SweepAxis = axis.parse()?;
    let values: Vec<f64> = if relative && axis == SweepAxis::PhiPrime {
        let (tr, _) = train::prepare_data(&cfg)?;
        let scale = phi_hat(&train::privacy_config(&cfg, tr.len())?);
        values.iter().map(|v| v * scale).collect()
    } else {
        values.to_vec()
    };
    let children = harness::run_sweep(&cfg, axis, &values)?;
    for c in &children {
        println!(
            "{} = {:e}: accuracy {:.4}",
            axis.name(),
            c.value,
            c.outcome.final_accuracy()
        );
    }
    if let Some(dir) = out.or_else(|| cfg.output_dir.clone()) {
        sweep::write_sweep_outputs(&dir, axis, &children)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_moments(config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>) -> CliResult {
    let mut cfg = match &config {
        Some(p) => MomentsConfig::load(p)?,
        None => MomentsConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("moments"));
    let report = harness::run_moments(&cfg, &dir)?;
    print!("{}", report.to_text());
    println!("wrote {}", dir.display());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Exit(EXIT_CHECKS, "moment checks did not pass".into()))
    }
}

fn cmd_account(exp: &ExperimentArgs, points: u64) -> CliResult {
    let cfg = exp.resolve()?;
    let (tr, _) = train::prepare_data(&cfg)?;
    let privacy = train::privacy_config(&cfg, tr.len())?;
    let budget = max_steps(&privacy)?;
    println!(
        "q {}  noise_std {:e}  phi_hat {:e}  target_epsilon {}  delta {:e}",
        privacy.sampling_rate(),
        privacy.noise_std(),
        phi_hat(&privacy),
        privacy.target_epsilon,
        privacy.delta
    );
    println!("max_steps {}", budget.steps);
    if budget.status == BudgetStatus::Exhausted {
        return Err(Failure::Exit(EXIT_BUDGET, "a single step exceeds the privacy budget".into()));
    }
    let horizon = cfg.steps.unwrap_or(budget.steps);
    let ledger = RdpLedger::default();
    let curve = subsampled_gaussian_curve(ledger.orders(), privacy.noise_multiplier, privacy.sampling_rate())?;
    println!("step,epsilon,best_order");
    let points = points.clamp(1, horizon);
    for i in 1..=points {
        let t = horizon * i / points;
        let spend = ledger.compose(&curve, t)?.to_epsilon(privacy.delta)?;
        println!("{t},{},{}", spend.epsilon, spend.best_order);
    }
    Ok(())
}

fn collect_runlogs(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<runlog::RunRecord>)>) -> Result<(), Error> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_runlogs(&p, root, out)?;
        } else if p.file_name().is_some_and(|n| n == "runlog.jsonl") {
            let name = p
                .parent()
                .and_then(|d| d.strip_prefix(root).ok())
                .map(|d| d.display().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| ".".into());
            out.push((name, runlog::read_runlog(&p)?));
        }
    }
    Ok(())
}

fn cmd_plotdata(input: &Path, out: Option<PathBuf>) -> CliResult {
    let mut runs = Vec::new();
    if input.is_dir() {
        collect_runlogs(input, input, &mut runs)?;
    } else {
        runs.push((".".to_string(), runlog::read_runlog(input)?));
    }
    if runs.is_empty() {
        return Err(Failure::Exit(EXIT_FAILURE, format!("no runlog.jsonl under {}", input.display())));
    }
    let csv = runlog::runlog_csv(&runs);
    match out {
        Some(p) => fs::write(&p, csv).map_err(|e| Error::Io { path: p.clone(), source: e })?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => EXIT_CONFIG,
        Error::NonFinite(_) | Error::StepOverflow => EXIT_NUMERIC,
        Error::Io { .. } => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { exp, out } => cmd_train(&exp, out),
        Command::Sweep {
            exp,
            axis,
            values,
            relative,
            out,
        } => cmd_sweep(&exp, &axis, &values, relative, out),
        Command::Moments { config, seed, out } => cmd_moments(config, seed, out),
        Command::Account { exp, points } => cmd_account(&exp, points),
        Command::Plotdata { input, out } => cmd_plotdata(&input, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Exit(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
