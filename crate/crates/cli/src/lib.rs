//! Command-line harness for the tempered-posterior experiments.
//!
//! Each run reads a TOML config, executes one experiment from
//! [`tempered_core::experiments`], and writes `<out>/<experiment>.csv` plus a
//! JSON sidecar `<out>/<experiment>.json` with the resolved config, the
//! library version and the wall-clock time.

pub mod config;

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tempered_core::experiments::{self as ex, CsvRow, Settings};

pub use config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    BvmConvergence,
    VbvmConvergence,
    RobustnessCurve,
    OptimalAlpha,
    FailureCase,
    AssumptionChecks,
    SurrogateFidelity,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::BvmConvergence,
        Experiment::VbvmConvergence,
        Experiment::RobustnessCurve,
        Experiment::OptimalAlpha,
        Experiment::FailureCase,
        Experiment::AssumptionChecks,
        Experiment::SurrogateFidelity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::BvmConvergence => "bvm-convergence",
            Experiment::VbvmConvergence => "vbvm-convergence",
            Experiment::RobustnessCurve => "robustness-curve",
            Experiment::OptimalAlpha => "optimal-alpha",
            Experiment::FailureCase => "failure-case",
            Experiment::AssumptionChecks => "assumption-checks",
            Experiment::SurrogateFidelity => "surrogate-fidelity",
        }
    }

    /// CSV column schema.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Experiment::BvmConvergence => ex::BvmRow::COLUMNS,
            Experiment::VbvmConvergence => ex::VbvmRow::COLUMNS,
            Experiment::RobustnessCurve => ex::CurveRow::COLUMNS,
            Experiment::OptimalAlpha => ex::OptimalAlphaRow::COLUMNS,
            Experiment::FailureCase => ex::FailureRow::COLUMNS,
            Experiment::AssumptionChecks => ex::AssumptionRow::COLUMNS,
            Experiment::SurrogateFidelity => ex::FidelityRow::COLUMNS,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("output error: {0}")]
    Output(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] tempered_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Output(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

/// JSON sidecar contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: ExperimentConfig,
    pub version: String,
    pub elapsed_seconds: f64,
}

/// Paths written by [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub csv: PathBuf,
    pub sidecar: PathBuf,
    pub rows: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

fn write_csv<R: CsvRow>(mut rows: Vec<R>, path: &Path) -> Result<usize, CliError> {
    ex::write_rows(&mut rows, create(path)?)?;
    Ok(rows.len())
}

/// Runs `experiment` with the resolved `config` and writes its outputs
/// under `config.out`.
pub fn run(experiment: Experiment, config: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let settings = config.settings(experiment)?;
    std::fs::create_dir_all(&config.out)
        .map_err(|e| CliError::Output(format!("out: cannot create {}: {e}", config.out.display())))?;
    let csv = config.out.join(format!("{experiment}.csv"));
    let sidecar = config.out.join(format!("{experiment}.json"));

    let start = Instant::now();
    let rows = with_threads(config.threads, || execute(experiment, &settings, &csv))?;
    let elapsed_seconds = start.elapsed().as_secs_f64();

    let mut echoed = config.clone();
    echoed.experiment = Some(experiment);
    let meta = Sidecar {
        config: echoed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        elapsed_seconds,
    };
    serde_json::to_writer_pretty(create(&sidecar)?, &meta)
        .map_err(|e| CliError::Output(format!("cannot write {}: {e}", sidecar.display())))?;
    Ok(RunOutput { csv, sidecar, rows })
}

fn execute(experiment: Experiment, s: &Settings, csv: &Path) -> Result<usize, CliError> {
    match experiment {
        Experiment::BvmConvergence => write_csv(ex::bvm_convergence(s)?, csv),
        Experiment::VbvmConvergence => write_csv(ex::vbvm_convergence(s)?, csv),
        Experiment::RobustnessCurve => write_csv(ex::robustness_curve(s)?, csv),
        Experiment::OptimalAlpha => write_csv(ex::optimal_alpha_study(s)?, csv),
        Experiment::FailureCase => write_csv(ex::failure_case(s)?, csv),
        Experiment::AssumptionChecks => write_csv(ex::assumption_checks(s)?, csv),
        Experiment::SurrogateFidelity => write_csv(ex::surrogate_fidelity(s)?, csv),
    }
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?
            .install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T: Send>(
    _threads: Option<usize>,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    f()
}
