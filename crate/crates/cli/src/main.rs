//! Command-line driver for the restoration-experiment engine.
//!
//! Every subcommand reads one JSON config (all keys optional, see
//! `RunConfig`), applies `--set dotted.path=value` overrides, and writes
//! its artifacts into the configured run directory. Exit codes: 0 success,
//! 2 configuration or lookup error, 3 budget exceeded, 4 numeric abort.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use optir_core::harness::{load_config, run_command};

#[derive(Parser)]
#[command(name = "optir", about = "Cooperative multi-tool image restoration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a degraded dataset with ground-truth degradation sets
    Synth(CommonArgs),
    /// Exhaustively evaluate all restoration plans per input
    Study(CommonArgs),
    /// Train the planning policy with group-relative policy optimization
    #[command(name = "train-planner")]
    TrainPlanner(CommonArgs),
    /// Co-train tool parameters through planned chains
    Cotrain(CommonArgs),
    /// Score a (policy, registry) pair on a benchmark preset
    Eval(CommonArgs),
    /// Aggregate run artifacts into summary.json
    Report(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// JSON config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key by dotted path, e.g. --set study.images=3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for --set seed=N
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for --set out_dir=DIR
    #[arg(long)]
    out: Option<PathBuf>,
}

fn split_set(raw: &str) -> Result<(String, String), String> {
    match raw.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("--set expects KEY=VALUE, got '{raw}'")),
    }
}

fn run(name: &str, args: &CommonArgs) -> Result<(), (i32, String)> {
    let mut overrides = Vec::new();
    for raw in &args.sets {
        overrides.push(split_set(raw).map_err(|e| (2, e))?);
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    if let Some(out) = &args.out {
        overrides.push(("out_dir".to_string(), out.to_string_lossy().into_owned()));
    }
    let config = load_config(args.config.as_deref(), &overrides)
        .map_err(|e| (e.exit_code(), e.to_string()))?;
    run_command(name, &config).map_err(|e| (e.exit_code(), e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Synth(a) => ("synth", a),
        Command::Study(a) => ("study", a),
        Command::TrainPlanner(a) => ("train-planner", a),
        Command::Cotrain(a) => ("cotrain", a),
        Command::Eval(a) => ("eval", a),
        Command::Report(a) => ("report", a),
    };
    match run(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}
