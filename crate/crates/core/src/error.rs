use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("curves live on different grids")]
    GridMismatch,

    #[error("shift {t} is not an integer multiple of dx = {dx}")]
    ShiftNotMultiple { t: f64, dx: f64 },

    #[error("tenor {tenor} outside [{lo}, {hi}]")]
    TenorOutOfRange { tenor: f64, lo: f64, hi: f64 },

    #[error("weights have length {got}, grid has {expected} points")]
    WeightsLength { got: usize, expected: usize },

    #[error("index {index} out of range (d = {d})")]
    IndexOutOfRange { index: usize, d: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),

    #[error("max_depth {requested} exceeds the limit {limit}")]
    MaxDepthExceeded { requested: usize, limit: usize },

    #[error("bracket basis is empty")]
    EmptyBasis,

    #[error("step matrix numerically singular at step {step} (pivot ratio {pivot_ratio:.3e})")]
    SingularStep { step: usize, pivot_ratio: f64 },

    #[error("flow records missing: {0}")]
    MissingRecords(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
