//! `cfran-evt`: run experiments, sweep parameters, fit tails, validate SINR.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 validation failure.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "cfran-evt", version, about = "Tail-risk-aware AP clustering simulator")]
struct Cli {
    /// Worker threads for independent experiments (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (seed, policy) pair of the config; write CSV traces and JSON results.
    Run {
        config: PathBuf,
        /// `section.key=value`, repeatable.
        #[arg(long = "override", value_name = "KEY=VAL")]
        overrides: Vec<String>,
        /// Output directory (default: $CFRAN_EVT_OUT, else the config's directory).
        #[arg(long, env = "CFRAN_EVT_OUT")]
        out: Option<PathBuf>,
    },
    /// Paired policy comparisons for each value of one config key.
    Sweep {
        config: PathBuf,
        /// Dotted config key, e.g. `solver.V`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long = "override", value_name = "KEY=VAL")]
        overrides: Vec<String>,
        #[arg(long, env = "CFRAN_EVT_OUT")]
        out: Option<PathBuf>,
    },
    /// Fit a GPD to the excesses of one CSV column over Q0; JSON to stdout.
    FitGpd {
        csv: PathBuf,
        #[arg(long)]
        q0: f64,
        #[arg(long, default_value = "Q")]
        column: String,
        /// Keep only rows of this UE (requires a `k` column).
        #[arg(long)]
        ue: Option<usize>,
        #[arg(long, default_value_t = cfran_evt::evt::DEFAULT_N_MIN)]
        n_min: usize,
    },
    /// Closed-form SINR against the Monte Carlo oracle on small random instances.
    ValidateSinr {
        config: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n_real: usize,
        #[arg(long, default_value_t = 20)]
        instances: u64,
        #[arg(long = "override", value_name = "KEY=VAL")]
        overrides: Vec<String>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::Run { config, overrides, out } => commands::run(&config, &overrides, out),
        Command::Sweep {
            config,
            axis,
            values,
            overrides,
            out,
        } => commands::sweep(&config, &axis, &values, &overrides, out),
        Command::FitGpd {
            csv,
            q0,
            column,
            ue,
            n_min,
        } => commands::fit_gpd(&csv, &column, ue, q0, n_min),
        Command::ValidateSinr {
            config,
            n_real,
            instances,
            overrides,
        } => commands::validate_sinr(&config, &overrides, n_real, instances),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
