use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use stp::commands::{load_raw, run, CommandError};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Verb {
    Prune,
    BaselineSuppressed,
    BaselineStandard,
    Estimate,
    Analyze,
    VerifyAppendixE,
    PoolInspect,
}

impl Verb {
    fn name(self) -> &'static str {
        match self {
            Verb::Prune => "prune",
            Verb::BaselineSuppressed => "baseline-suppressed",
            Verb::BaselineStandard => "baseline-standard",
            Verb::Estimate => "estimate",
            Verb::Analyze => "analyze",
            Verb::VerifyAppendixE => "verify-appendix-e",
            Verb::PoolInspect => "pool-inspect",
        }
    }
}

/// Structured pruning with stimulative training.
///
/// Exit codes: 0 success, 1 verification failure, 2 usage or config error.
/// Errors are printed to stderr as JSON.
#[derive(Debug, Parser)]
#[command(name = "stp", version)]
struct Cli {
    verb: Verb,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory for run artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

fn fail(e: CommandError) -> ExitCode {
    eprintln!("{}", serde_json::to_string(&e.to_json()).unwrap_or_else(|_| e.to_string()));
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let raw = match load_raw(cli.config.as_deref(), &cli.sets, cli.seed) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    match run(cli.verb.name(), &raw, &cli.out) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}
