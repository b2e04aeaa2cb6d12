//! `icemamba`: synthetic data, training, forecasting, reference forecasts,
//! verification, the September benchmark and explainability from one binary.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure. Failures print one line to stderr:
//! `icemamba: error code=<n> kind=<usage|data|numeric> message=<text>`.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;
use crate::config::{ForecastMode, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "icemamba", version = manifest::VERSION, about = "Seasonal sea-ice concentration forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded synthetic dataset as IMGR files.
    Synth(Flags),
    /// Train a model and save the checkpoint, history and statistics.
    Train(Flags),
    /// Forecast the test period from a checkpoint.
    Forecast(Flags),
    /// Write the three reference forecasts for the test period.
    Baseline(Flags),
    /// Score a forecast directory against observations.
    Evaluate(Flags),
    /// Per-year September scores under rolling recalibration.
    Benchmark(Flags),
    /// Permutation importance, optionally with a detrended retraining.
    Explain(Flags),
}

#[derive(Args, Clone)]
struct Flags {
    /// Configuration file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialization, shuffling, permutations and synthesis.
    #[arg(long)]
    seed: Option<u64>,
    /// Forecast mode.
    #[arg(long, value_parser = ["direct", "autoregressive"])]
    mode: Option<String>,
    /// Rolling splits for this test year (also the only benchmark year).
    #[arg(long)]
    target_year: Option<i32>,
    /// Number of lead months.
    #[arg(long)]
    leads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Variable to detrend and retrain without (explain only).
    #[arg(long)]
    detrend: Option<String>,
}

impl Command {
    fn name_and_flags(&self) -> (&'static str, &Flags) {
        match self {
            Command::Synth(f) => ("synth", f),
            Command::Train(f) => ("train", f),
            Command::Forecast(f) => ("forecast", f),
            Command::Baseline(f) => ("baseline", f),
            Command::Evaluate(f) => ("evaluate", f),
            Command::Benchmark(f) => ("benchmark", f),
            Command::Explain(f) => ("explain", f),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fail(f: &Failure) -> ExitCode {
    eprintln!("icemamba: error code={} kind={} message={}", f.code(), f.kind(), one_line(f.message()));
    ExitCode::from(f.code() as u8)
}

/// Caps the worker pool at `ICEMAMBA_THREADS` when set.
fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("ICEMAMBA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("ICEMAMBA_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<Vec<String>, Failure> {
    init_threads()?;
    let (name, flags) = cli.command.name_and_flags();
    if flags.detrend.is_some() && name != "explain" {
        return Err(Failure::Usage("--detrend applies to explain only".into()));
    }
    let overrides = Overrides {
        seed: flags.seed,
        mode: flags.mode.as_deref().map(|m| m.parse::<ForecastMode>()).transpose().map_err(Failure::Usage)?,
        target_year: flags.target_year,
        leads: flags.leads,
        out: flags.out.clone(),
        detrend: flags.detrend.clone(),
    };
    let cfg = RunConfig::load(flags.config.as_deref(), &overrides)?;
    cfg.validate()?;
    let outcome = match &cli.command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Forecast(_) => commands::forecast(&cfg),
        Command::Baseline(_) => commands::baseline(&cfg),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::Benchmark(_) => commands::benchmark(&cfg),
        Command::Explain(_) => commands::explain(&cfg),
    }?;
    let path = manifest::write(name, &cfg, flags.config.as_deref(), &outcome)?;
    let mut lines = outcome.lines;
    lines.push(format!("manifest: {}", path.display()));
    Ok(lines)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&Failure::Usage(e.to_string().lines().next().unwrap_or("bad arguments").to_string())),
    };
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(f) => fail(&f),
    }
}
