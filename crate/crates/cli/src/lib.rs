//! Batch experiment runner for the hjm-hypo laboratory.
//!
//! A run reads one JSON config, executes a subcommand and writes its
//! reports under an output directory together with `meta.json`.

pub mod config;
pub mod output;
mod runner;

use std::path::Path;

use clap::ValueEnum;
use serde::Serialize;

pub use config::{ExperimentConfig, ExperimentSection, GridConfig, Resolved, SimSection};
pub use hjm_hypo_core as core;

pub const TOOL: &str = "hjm-hypo";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Numerical(_) => 2,
            RunError::Io(_) => 3,
        }
    }
}

impl From<hjm_hypo_core::Error> for RunError {
    fn from(e: hjm_hypo_core::Error) -> Self {
        use hjm_hypo_core::Error as E;
        match e {
            E::Io(_) | E::Csv(_) => RunError::Io(e.to_string()),
            E::SingularStep { .. } | E::NonFinite(_) | E::EmptyBasis => {
                RunError::Numerical(e.to_string())
            }
            _ => RunError::Config(e.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Paths and terminal summary statistics.
    Simulate,
    /// Malliavin covariance per path and the ensemble density verdict.
    Covariance,
    /// Bracket basis, rank by depth and verdict.
    Hormander,
    /// Gaussian closed form against Monte Carlo.
    Oracle,
    /// Jacobian, pairing and flow-property residuals.
    Flowcheck,
    /// Long-rate conservation series.
    Longrate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Covariance => "covariance",
            Command::Hormander => "hormander",
            Command::Oracle => "oracle",
            Command::Flowcheck => "flowcheck",
            Command::Longrate => "longrate",
        }
    }
}

/// Command-line overrides. `threads = None` or `Some(0)` uses every core.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub threads: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub headline: String,
    pub files: Vec<String>,
    pub threads: usize,
}

pub fn run(
    command: Command,
    config_path: &Path,
    out_dir: &Path,
    opts: RunOptions,
) -> Result<RunOutcome, RunError> {
    let resolved = ExperimentConfig::load(config_path)?;
    run_resolved(command, resolved, out_dir, opts)
}

pub fn run_resolved(
    command: Command,
    mut res: Resolved,
    out_dir: &Path,
    opts: RunOptions,
) -> Result<RunOutcome, RunError> {
    if let Some(seed) = opts.seed {
        res.config.experiment.seed = seed;
    }
    if let Some(paths) = opts.paths {
        if paths == 0 {
            return Err(RunError::Config("--paths must be positive".into()));
        }
        res.config.experiment.paths = paths;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = opts.threads.filter(|&n| n > 0) {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| RunError::Io(format!("worker pool: {e}")))?;
    let threads = pool.current_num_threads();
    let stamp = output::Stamp {
        tool: TOOL,
        version: hjm_hypo_core::VERSION,
        command: command.name().into(),
        seed: res.config.experiment.seed,
        paths: res.config.experiment.paths,
        input_sha256: res.input_sha256.clone(),
        config: serde_json::to_value(&res.config).map_err(|e| RunError::Config(e.to_string()))?,
    };
    let out = output::OutputDir::create(out_dir, stamp)?;
    let mut ctx = runner::Ctx {
        res: &res,
        pool: &pool,
        out,
    };
    let headline = match command {
        Command::Simulate => runner::simulate(&mut ctx)?,
        Command::Covariance => runner::covariance(&mut ctx)?,
        Command::Hormander => runner::hormander(&mut ctx)?,
        Command::Oracle => runner::oracle(&mut ctx)?,
        Command::Flowcheck => runner::flowcheck(&mut ctx)?,
        Command::Longrate => runner::longrate(&mut ctx)?,
    };
    let files = ctx.out.finish(threads, &headline)?;
    Ok(RunOutcome {
        headline,
        files,
        threads,
    })
}
