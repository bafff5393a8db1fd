//! Command-line runner for the implicitreg experiments.
//!
//! `implicitreg run <config> [--set key=value]... [--jobs J] [--out DIR]`
//! reads a flat config, runs one experiment and writes `config.echo`, the
//! experiment's CSV files and `summary.txt` into the output directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;
pub use experiments::{run_experiment, Outcome};

/// Environment variable that replaces `train.seed`.
pub const SEED_ENV: &str = "IMPLICITREG_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CRITERION_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "implicitreg",
    version,
    about = "Modified-loss verification and training experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Override one config key; may be repeated.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory, replacing `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Loads the config, applies overrides and the seed variable, validates.
/// Returns the config together with the text to echo.
pub fn load_config(
    path: &Path,
    overrides: &[String],
    seed_env: Option<&str>,
) -> Result<(ExperimentConfig, String), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = ExperimentConfig::parse_str(&text)?;
    cfg.apply_overrides(overrides)?;
    let mut echo = text;
    if !echo.is_empty() && !echo.ends_with('\n') {
        echo.push('\n');
    }
    for o in overrides {
        echo.push_str(&format!("# --set {o}\n"));
    }
    if let Some(seed) = seed_env {
        cfg.train.seed = seed.trim().parse().map_err(|_| {
            CliError::Usage(format!("{SEED_ENV}: not an unsigned integer: {seed:?}"))
        })?;
        echo.push_str(&format!("# {SEED_ENV}={seed}\n"));
    }
    cfg.validate()?;
    Ok((cfg, echo))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))
}

/// Runs an experiment and writes every artifact; returns the outcome.
pub fn execute(
    cfg: &ExperimentConfig,
    echo: &str,
    jobs: Option<usize>,
) -> Result<Outcome, CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let outcome = pool.install(|| run_experiment(cfg))?;

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write(dir, "config.echo", echo)?;
    for (name, contents) in &outcome.files {
        write(dir, name, contents)?;
    }
    write(dir, "summary.txt", &outcome.summary_text())?;
    Ok(outcome)
}

fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Core(implicitreg_core::Error::Diverged { .. })
        | CliError::Core(implicitreg_core::Error::NonFinite(_)) => EXIT_CRITERION_FAILED,
        _ => EXIT_USAGE,
    }
}

/// Entry point shared by the binary and the tests; returns the exit status.
pub fn main_with(cli: Cli) -> i32 {
    let Command::Run {
        config,
        overrides,
        jobs,
        out,
    } = cli.command;
    let seed_env = std::env::var(SEED_ENV).ok();
    let result =
        load_config(&config, &overrides, seed_env.as_deref()).and_then(|(mut cfg, echo)| {
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            execute(&cfg, &echo, jobs)
        });
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary_text());
            if outcome.passed {
                EXIT_OK
            } else {
                EXIT_CRITERION_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
