//! Experiment harness: regression benchmark, MNIST shift study, set coverage
//! over probability files, cross-method analysis and SVG reports.

pub mod analyze;
pub mod config;
pub mod mnist;
pub mod regress;
pub mod report;
pub mod setcov;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;
use uqcov::metrics::{write_reports_csv, CoverageReport};

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Bad configuration or unusable inputs exit with 2; anything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Input(_) => 2,
            HarnessError::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "uqcov", version, about = "Coverage and width of uncertainty-quantification methods")]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabular regression benchmark over datasets × split seeds × methods.
    Regress,
    /// Train classifiers on clean MNIST and evaluate rotated, rolled and corrupted test sets.
    MnistShift,
    /// Prediction-set metrics over probability files.
    Setcov {
        /// Probability files (added to `setcov.files`).
        files: Vec<PathBuf>,
        /// Files hold logits; rows are softmaxed.
        #[arg(long)]
        logits: bool,
    },
    /// Above-line fractions and rank tables over report CSVs.
    Analyze {
        /// Report CSVs (added to `analyze.reports`).
        reports: Vec<PathBuf>,
    },
    /// Render SVG plots from an analysis JSON file.
    Report {
        /// Defaults to `<out>/analysis/analysis.json`.
        analysis: Option<PathBuf>,
    },
}

/// What a finished command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub failed_cells: usize,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.failed_cells > 0 {
            1
        } else {
            0
        }
    }
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(alpha) = cli.alpha {
        config.alpha = alpha;
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    match &cli.command {
        Command::Setcov { files, logits } => {
            config.setcov.files.extend(files.iter().cloned());
            config.setcov.logits |= *logits;
        }
        Command::Analyze { reports } => config.analyze.reports.extend(reports.iter().cloned()),
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let config = resolve_config(cli)?;
    if config.threads > 0 {
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global();
    }
    match &cli.command {
        Command::Regress => regress::cmd_regress(&config),
        Command::MnistShift => mnist::cmd_mnist_shift(&config),
        Command::Setcov { .. } => setcov::cmd_setcov(&config),
        Command::Analyze { .. } => analyze::cmd_analyze(&config),
        Command::Report { analysis } => {
            let input = analysis
                .clone()
                .unwrap_or_else(|| config.out.join("analysis").join("analysis.json"));
            report::cmd_report(&input, &config.out.join("report"))
        }
    }
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

pub(crate) fn write_reports(path: &Path, reports: &[CoverageReport]) -> Result<PathBuf> {
    let mut buf = Vec::new();
    write_reports_csv(reports, &mut buf).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    write_file(path, buf)
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_file(path, text)
}

/// Serializes rows of a plain record type as CSV.
pub(crate) fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<PathBuf> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
    }
    let buf = w.into_inner().map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    write_file(path, buf)
}
