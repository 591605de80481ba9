mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use crate::config::{Command, Overrides};

/// Experiment runner for conditional polynomial expansion networks.
///
/// Settings come from built-in defaults, then `--config`, then the flags
/// below. Artifacts go to `--out`, else the config's `output_dir`, else
/// `$COPE_OUT/<command>-seed<seed>`, else `runs/<command>-seed<seed>`.
#[derive(Debug, Parser)]
#[command(name = "cope", version)]
struct Cli {
    /// What to run; may instead come from the config's `command` key.
    #[arg(value_enum)]
    command: Option<Command>,
    /// JSON config file with flat keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Verification suite to run (repeatable); default is all of them.
    #[arg(long = "suite", value_name = "NAME")]
    suites: Vec<String>,
    /// Training steps.
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
}

const EXIT_FAILED: u8 = 1;
const EXIT_INVALID: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match config::parse(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{}: {e}", path.display());
                    return ExitCode::from(EXIT_INVALID);
                }
            },
            Err(e) => {
                eprintln!("cannot read {}: {e}", path.display());
                return ExitCode::from(EXIT_INVALID);
            }
        },
        None => config::ExperimentConfig::default(),
    };
    let overrides = Overrides {
        command: cli.command,
        seed: cli.seed,
        out: cli.out,
        suites: cli.suites,
        steps: cli.steps,
        out_root: std::env::var_os("COPE_OUT").map(PathBuf::from),
    };
    let resolved = match config::resolve(file, overrides) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_INVALID);
        }
    };
    match run::run(&resolved) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILED)
        }
    }
}
