//! Command-line front end: problem files in, trajectory CSV and JSON
//! reports out.
//!
//! Exit codes: 0 success, 2 solver non-convergence, 3 regularity failure
//! (a singular Hessian, serialized into the report), 4 validation or
//! input errors.

mod problem;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::run::{error_code, run_file, sweep, validate_file, Flags};

#[derive(Parser)]
#[command(
    name = "algmech",
    version,
    about = "Mechanics and optimal control on Lie algebroid charts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the structure equations of a problem file's chart.
    Validate {
        /// Problem file (JSON).
        input: PathBuf,
        /// Directory for report.json; omit for console output only.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the validation tolerance.
        #[arg(long)]
        tol: Option<f64>,
        /// Seed for chart sampling.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run a problem file in its own mode.
    Run {
        /// Problem file (JSON).
        input: PathBuf,
        /// Output directory for trajectory.csv and report.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the file's tolerance (validation or regularity).
        #[arg(long)]
        tol: Option<f64>,
        /// Seed for chart sampling.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run one problem file repeatedly over a numeric parameter.
    Sweep {
        /// Problem file (JSON).
        input: PathBuf,
        /// Root output directory; one subdirectory per value.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Dot-separated path of the parameter to vary, e.g. `params.vk`
        /// or `boundary.T`.
        #[arg(long)]
        param: String,
        /// Values to run, e.g. `--values 0.1,0.2,0.5`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Override the file's tolerance.
        #[arg(long)]
        tol: Option<f64>,
        /// Seed for chart sampling.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ALGMECH_LOG", "error"))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 4,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Validate { input, out, tol, seed } => {
            validate_file(&input, out.as_deref(), &Flags { tol, seed })
        }
        Command::Run { input, out, tol, seed } => run_file(&input, &out, &Flags { tol, seed }),
        Command::Sweep { input, out, param, values, tol, seed } => {
            sweep(&input, &out, &param, &values, &Flags { tol, seed })
        }
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}
