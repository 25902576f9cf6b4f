//! Config ingestion, run orchestration and reports.
//!
//! Exit statuses: 0 success, 1 configuration or I/O error,
//! 2 blow-up (partial artifacts are kept), 3 failed ODE verification.

pub mod artifacts;
pub mod config;
pub mod output;
pub mod report;
pub mod run;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use hyperboloidal_core::diagnostics::{default_cutoff, FitWeight};
use hyperboloidal_core::odekit::run_bound_suite;
use thiserror::Error;

use crate::artifacts::{read_json, FitRequest, SnapshotFile};
use crate::config::FieldName;
use crate::output::to_json;
use crate::run::{fit_state, run_file, RunResult};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_BLOWUP: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "hyperboloidal", version, about = "Hyperboloidal evolutions, diagnostics and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightArg {
    Uniform,
    Remainder,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FieldArg {
    F,
    PhiPlus,
    PhiMinus,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evolve the scenario of a config file and write its artifacts.
    Run {
        config: PathBuf,
        /// Run directory (overrides the config and the environment).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a run directory without modifying it.
    Report { dir: PathBuf },
    /// Randomized bound checks of the ODE toolkit.
    VerifyOdes {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Fit a polyhomogeneous expansion to one snapshot file.
    Fit {
        snapshot: PathBuf,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        depth: usize,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        jmax: usize,
        #[arg(long, value_enum, default_value_t = WeightArg::Uniform)]
        weight: WeightArg,
        /// Smallest fit abscissa (default 4h).
        #[arg(long)]
        x_min: Option<f64>,
        /// Largest fit abscissa (default two cells below the edge).
        #[arg(long)]
        x_max: Option<f64>,
        #[arg(long, value_enum, default_value_t = FieldArg::F)]
        field: FieldArg,
        #[arg(long, default_value_t = 0)]
        component: usize,
        #[arg(long, default_value_t = 0)]
        v_node: usize,
    },
}

fn fit_command(
    snapshot: PathBuf,
    request: impl FnOnce(&SnapshotFile) -> FitRequest,
    field: FieldName,
) -> Result<Vec<u8>, CliError> {
    let snap: SnapshotFile =
        read_json(&snapshot).map_err(|e| CliError::Input(format!("{}: {e}", snapshot.display())))?;
    let req = request(&snap);
    let file = fit_state(&snap.state, field.kind(), req);
    if let Some(e) = &file.error {
        return Err(CliError::Input(format!("fit failed: {e}")));
    }
    Ok(to_json(&file))
}

/// Run the command line; returns the process exit status.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return EXIT_ERROR;
            }
            let _ = write!(stdout, "{e}");
            return EXIT_OK;
        }
    };
    match cli.command {
        Command::Run { config, out } => match run_file(&config, out.as_deref()) {
            Ok(RunResult::Completed(dir)) => {
                let _ = writeln!(stdout, "run completed; artifacts in {}", dir.display());
                EXIT_OK
            }
            Ok(RunResult::BlowUp(dir)) => {
                let _ = writeln!(stderr, "blow-up detected; partial artifacts in {}", dir.display());
                EXIT_BLOWUP
            }
            Err(e) => {
                let _ = writeln!(stderr, "error: {e}");
                EXIT_ERROR
            }
        },
        Command::Report { dir } => {
            if !dir.is_dir() {
                let _ = writeln!(stderr, "error: {} is not a directory", dir.display());
                return EXIT_ERROR;
            }
            let (text, problems) = report::report(&dir);
            let _ = write!(stdout, "{text}");
            if problems > 0 {
                EXIT_ERROR
            } else {
                EXIT_OK
            }
        }
        Command::VerifyOdes { seed, cases, tolerance } => match run_bound_suite(seed, cases, tolerance) {
            Ok(r) => {
                let passed = r.passed(tolerance);
                let _ = writeln!(
                    stdout,
                    "seed {}: {} cases, tau-bound failures {}, x-bound failures {}, min slack tau {:e}, x {:e}: {}",
                    r.seed,
                    r.cases,
                    r.tau_failures,
                    r.x_failures,
                    r.tau_min_slack,
                    r.x_min_slack,
                    if passed { "PASS" } else { "FAIL" }
                );
                if passed {
                    EXIT_OK
                } else {
                    EXIT_VERIFY
                }
            }
            Err(e) => {
                let _ = writeln!(stderr, "error: {e}");
                EXIT_VERIFY
            }
        },
        Command::Fit { snapshot, delta, depth, beta, jmax, weight, x_min, x_max, field, component, v_node } => {
            let field = match field {
                FieldArg::F => FieldName::F,
                FieldArg::PhiPlus => FieldName::PhiPlus,
                FieldArg::PhiMinus => FieldName::PhiMinus,
            };
            let weight = match weight {
                WeightArg::Uniform => FitWeight::Uniform,
                WeightArg::Remainder => FitWeight::Remainder,
            };
            let request = |s: &SnapshotFile| FitRequest {
                tau: s.tau,
                field: field.label().to_string(),
                component,
                v_node,
                delta,
                beta,
                depth,
                jmax,
                weight,
                x_min: x_min.unwrap_or_else(|| default_cutoff(&s.state)),
                x_max: x_max.unwrap_or_else(|| s.state.grid.edge() - 2.0 * s.state.grid.h()),
            };
            match fit_command(snapshot, request, field) {
                Ok(bytes) => {
                    let _ = stdout.write_all(&bytes);
                    EXIT_OK
                }
                Err(e) => {
                    let _ = writeln!(stderr, "error: {e}");
                    EXIT_ERROR
                }
            }
        }
    }
}
