//! `anholoflow <command> --config <file> [--seed N] [--out DIR]`
//!
//! One batch run per invocation.  The subcommand must match the
//! `command` entry of the config file; `--seed` and `--out` override the
//! config, and the `ANHOLOFLOW_OUT` environment variable reroots any
//! relative output directory.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical abort,
//! 4 integrity failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use anholoflow::config::{Command as RunCommand, RunConfig};
use anholoflow::error::{Error, Result};
use anholoflow::runner::{execute, resolve_output_dir};

#[derive(Parser)]
#[command(name = "anholoflow", version, about = "Metric-flow and diffusion runs on 2+2 charts")]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Debug, Clone, Parser)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Build an exact-solution metric and its residual report.
    GenMetric(CommonArgs),
    /// Evolve the metric blocks and the coupled potential.
    Flow(CommonArgs),
    /// Run the stochastic diffusion ensemble.
    Spde(CommonArgs),
    /// Evaluate functionals and the connection comparison.
    Functionals(CommonArgs),
    /// Verify and merge finished run directories.
    Report(CommonArgs),
}

impl CliCommand {
    fn split(self) -> (RunCommand, CommonArgs) {
        match self {
            CliCommand::GenMetric(a) => (RunCommand::GenMetric, a),
            CliCommand::Flow(a) => (RunCommand::Flow, a),
            CliCommand::Spde(a) => (RunCommand::Spde, a),
            CliCommand::Functionals(a) => (RunCommand::Functionals, a),
            CliCommand::Report(a) => (RunCommand::Report, a),
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf> {
    let (expected, args) = cli.command.split();
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", args.config.display()))
    })?;
    let mut cfg = RunConfig::from_toml(&text)?;
    if cfg.command != expected {
        return Err(Error::Config(format!(
            "config selects command `{}` but the CLI asked for `{}`",
            cfg.command.name(),
            expected.name()
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let env_root = std::env::var("ANHOLOFLOW_OUT").ok();
    let dir = resolve_output_dir(&cfg, args.out.as_deref(), env_root.as_deref());
    execute(&cfg, &text, &dir)?;
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            println!("run complete: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
