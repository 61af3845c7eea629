//! `gstop`: experiments with constrained nonlinear expectations and optimal stopping
//! on binomial trees.

pub mod commands;
pub mod config;
pub mod report;

use std::fmt;
use std::path::PathBuf;

use clap::Parser;

pub use commands::Command;
pub use config::{ConfigError, ExperimentConfig};
pub use report::RunReport;

/// Why a run did not succeed; each variant has its own exit code.
#[derive(Debug)]
pub enum Failure {
    /// Usage or configuration problem (exit 1).
    Config(String),
    /// Solver, stability or feasibility problem (exit 2).
    Solver(String),
    /// The property suite reported failures (exit 3).
    Property(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Solver(_) => 2,
            Failure::Property(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Solver(m) => write!(f, "solver error: {m}"),
            Failure::Property(m) => write!(f, "property failure: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<gstop_core::Error> for Failure {
    fn from(e: gstop_core::Error) -> Self {
        use gstop_core::Error as E;
        match e {
            E::Config(_) | E::Domain(_) | E::Parse(_) | E::Signature { .. } | E::Probe { .. } | E::Capacity(_) | E::Shape { .. } => {
                Failure::Config(e.to_string())
            }
            E::Eval { .. } | E::Picard { .. } | E::Stability(_) | E::Infeasible { .. } => Failure::Solver(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(format!("cannot write output: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "gstop", version, about = "Constrained nonlinear expectations and optimal stopping on binomial trees")]
pub struct Cli {
    /// What to run.
    #[arg(value_enum)]
    pub command: Command,
    /// JSON experiment config; defaults are used for missing fields.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `--set tree.steps=4`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory [default: $GSTOP_OUT_DIR, else ./gstop-out].
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Print the report to stdout instead of writing files.
    #[arg(long)]
    pub stdout: bool,
}

/// Loads, runs and writes; returns the report when one was produced.
pub fn execute(cli: &Cli) -> Result<RunReport, (Failure, Option<RunReport>)> {
    let cfg = match &cli.config {
        Some(path) => config::load(path, &cli.overrides),
        None => config::from_value(serde_json::json!({}), &cli.overrides),
    }
    .map_err(|e| (e.into(), None))?;
    let functions = config::functions(&cfg).map_err(|e| (e.into(), None))?;
    let report = commands::run(cli.command, &cfg, &functions).map_err(|e| (e, None))?;
    if cli.stdout {
        print!("{}", report.to_json());
    } else {
        let dir = cli.out.clone().unwrap_or_else(report::default_out_dir);
        let write = || -> Result<(), Failure> {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("report.json"), report.to_json())?;
            report::emit_plot_data(&report, &dir)?;
            Ok(())
        };
        write().map_err(|e| (e, None))?;
    }
    match commands::verdict(&report) {
        Some(f) => Err((f, Some(report))),
        None => Ok(report),
    }
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started = std::time::Instant::now();
    let code = match execute(&cli) {
        Ok(_) => 0,
        Err((f, _)) => {
            eprintln!("gstop: {f}");
            f.exit_code()
        }
    };
    eprintln!("gstop: {} finished in {:.3} s", cli.command.name(), started.elapsed().as_secs_f64());
    code
}
