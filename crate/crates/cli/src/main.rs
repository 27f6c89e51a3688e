use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use dpets_core::agent::RunConfig;
use dpets_core::experiment::{self, TrialOutcome};
use dpets_core::regression::{gap_ratio, RegressConfig};
use dpets_core::Error;

/// Model-based RL experiments: learning runs, ablations and the
/// uncertainty regression check.
#[derive(Parser, Debug)]
#[command(name = "dpets", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run learning trials and write learning_curve.csv.
    Run(RunArgs),
    /// Fit the 1-D regression model and write predictions.csv.
    Regress(RegressArgs),
    /// Check a config file without running anything.
    Validate(ValidateArgs),
    /// Continue an interrupted run from its checkpoints.
    Resume(ResumeArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory (DPETS_OUT overrides it).
    #[arg(long, default_value = "dpets-out")]
    out: PathBuf,
}

impl OutArg {
    fn resolve(&self) -> PathBuf {
        match std::env::var_os("DPETS_OUT") {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out.clone(),
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Base seed; trial t uses seed + t.
    #[arg(long)]
    seed: Option<u64>,
    /// full, mc, be, no_fec or no_du.
    #[arg(long)]
    ablation: Option<String>,
    #[command(flatten)]
    out: OutArg,
    /// Number of trials run concurrently.
    #[arg(long, default_value_t = 1)]
    parallel_trials: usize,
}

#[derive(Args, Debug)]
struct RegressArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args, Debug)]
struct ResumeArgs {
    /// Must match the stored config when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
    #[arg(long, default_value_t = 1)]
    parallel_trials: usize,
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))
}

fn load_run_config(path: &Path, seed: Option<u64>, ablation: Option<&str>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::from_json(&read_text(path)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = ablation {
        cfg.ablation = a.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_regress_config(path: &Path, seed: Option<u64>) -> Result<RegressConfig, Failure> {
    let mut cfg = RegressConfig::from_json(&read_text(path)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(outcomes: &[TrialOutcome], out: &Path) -> Result<(), Failure> {
    let mut failed = Vec::new();
    for o in outcomes {
        let last = o.logs.last().map_or(f64::NAN, |l| l.total_return);
        match &o.error {
            None => info!("trial {}: {} episodes, final return {last:.3}", o.trial, o.logs.len()),
            Some(e) => {
                error!("trial {} failed: {e}", o.trial);
                failed.push(o.trial);
            }
        }
    }
    println!("{}", out.join("learning_curve.csv").display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("trials {failed:?} failed")))
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(a) => {
            let cfg = load_run_config(&a.config, a.seed, a.ablation.as_deref())?;
            let out = a.out.resolve();
            info!("config hash {}", cfg.hash());
            let outcomes = experiment::run_trials(&cfg, a.trials, &out, a.parallel_trials)?;
            report(&outcomes, &out)
        }
        Command::Regress(a) => {
            let cfg = load_regress_config(&a.config, a.seed)?;
            let out = a.out.resolve();
            let rows = experiment::run_regression(&cfg, &out)?;
            info!("gap/in-support std ratio {:.3}", gap_ratio(&rows));
            println!("{}", out.join("predictions.csv").display());
            Ok(())
        }
        Command::Validate(a) => {
            let text = read_text(&a.config)?;
            let looks_like_regression = serde_json::from_str::<serde_json::Value>(&text)
                .map(|v| v.get("generator").is_some())
                .unwrap_or(false);
            if looks_like_regression {
                load_regress_config(&a.config, None)?;
            } else {
                load_run_config(&a.config, None, a.ablation.as_deref())?;
            }
            println!("ok");
            Ok(())
        }
        Command::Resume(a) => {
            let expected = match &a.config {
                Some(p) => Some(load_run_config(p, None, None)?),
                None => None,
            };
            let out = a.out.resolve();
            let outcomes = experiment::resume_trials(&out, expected.as_ref(), a.parallel_trials)?;
            report(&outcomes, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
