//! Experiment configuration: one JSON document with sections
//! `grid`, `model`, `sim`, `functionals` and `experiment`.

use std::path::Path;

use hjm_hypo_core::grid::{make_grid, BoundaryMode, GridSpec, LinearFunctional, Metric};
use hjm_hypo_core::malliavin::DEFAULT_DENSITY_THRESHOLD;
use hjm_hypo_core::oracles::DEFAULT_ORACLE_SUBSTEPS;
use hjm_hypo_core::{CurveSpec, FieldModel, ModelSpec, Scheme, SimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::RunError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
    pub boundary: BoundaryMode,
}

impl GridConfig {
    pub fn build(&self) -> hjm_hypo_core::Result<GridSpec> {
        make_grid(self.x_min, self.x_max, self.n_points, self.boundary)
    }
}

fn default_scheme() -> Scheme {
    Scheme::ItoSplit
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub t_end: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Initial forward curve.
    pub initial: CurveSpec,
    #[serde(default)]
    pub metric: Metric,
}

fn default_seed() -> u64 {
    1
}
fn default_paths() -> usize {
    100
}
fn default_save_paths() -> usize {
    1
}
fn default_max_steps() -> usize {
    256
}
fn default_threshold() -> f64 {
    DEFAULT_DENSITY_THRESHOLD
}
fn default_bins() -> usize {
    32
}
fn default_depth() -> usize {
    8
}
fn default_probes() -> usize {
    8
}
fn default_fd_eps() -> f64 {
    1e-4
}
fn default_z() -> f64 {
    4.0
}
fn default_substeps() -> usize {
    DEFAULT_ORACLE_SUBSTEPS
}
fn default_check_paths() -> usize {
    4
}
fn default_flow_pairs() -> usize {
    10
}

/// Run parameters. Worker count is deliberately absent: it never changes results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Paths written out in full by `simulate`.
    #[serde(default = "default_save_paths")]
    pub save_paths: usize,
    /// Step cap for the covariance and flow checks.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_threshold")]
    pub density_threshold: f64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default = "default_depth")]
    pub max_depth: usize,
    /// Defaults to the rank window width.
    #[serde(default)]
    pub target_dim: Option<usize>,
    /// Defaults to `1e-8 n_points`.
    #[serde(default)]
    pub rank_tol: Option<f64>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_fd_eps")]
    pub fd_eps: f64,
    #[serde(default = "default_z")]
    pub z_threshold: f64,
    #[serde(default = "default_substeps")]
    pub oracle_substeps: usize,
    /// Paths used by `flowcheck`, which keeps full step matrices.
    #[serde(default = "default_check_paths")]
    pub check_paths: usize,
    #[serde(default = "default_flow_pairs")]
    pub flow_pairs: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub model: ModelSpec,
    pub sim: SimSection,
    pub functionals: Vec<LinearFunctional>,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

fn ctx(what: &'static str) -> impl Fn(hjm_hypo_core::Error) -> RunError {
    move |e| RunError::Config(format!("{what}: {e}"))
}

/// A parsed config with everything sampled on its grid.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub grid: GridSpec,
    pub model: FieldModel,
    pub sim: SimConfig,
    pub steps: usize,
    /// Hex SHA-256 of the raw config bytes.
    pub input_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(format!("config: {e}")))
    }

    /// Samples the model and checks every section against the grid.
    pub fn resolve(self, input_sha256: String) -> Result<Resolved, RunError> {
        let grid = self.grid.build().map_err(ctx("grid"))?;
        let model = self.model.build(&grid).map_err(ctx("model"))?;
        self.sim.initial.validate().map_err(ctx("sim.initial"))?;
        if self.functionals.is_empty() {
            return Err(RunError::Config(
                "functionals: at least one is required".into(),
            ));
        }
        for f in &self.functionals {
            f.validate(&grid).map_err(ctx("functionals"))?;
        }
        let mut sim = SimConfig::new(&grid, self.sim.t_end, self.sim.scheme);
        sim.metric = self.sim.metric;
        let steps = sim.steps(&grid).map_err(ctx("sim"))?;
        let e = &self.experiment;
        if e.paths == 0 {
            return Err(RunError::Config("experiment.paths must be positive".into()));
        }
        if e.histogram_bins == 0 {
            return Err(RunError::Config(
                "experiment.histogram_bins must be positive".into(),
            ));
        }
        Ok(Resolved {
            config: self,
            grid,
            model,
            sim,
            steps,
            input_sha256,
        })
    }

    pub fn load(path: &Path) -> Result<Resolved, RunError> {
        let bytes =
            std::fs::read(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|e| RunError::Config(format!("{}: not UTF-8: {e}", path.display())))?;
        Self::parse(&text)?.resolve(sha256_hex(&bytes))
    }
}
