use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("h must be positive, got h({a}, {y}) = {value}")]
    NonPositiveH { a: f64, y: f64, value: f64 },
    #[error("integration failed: {0}")]
    IntegrationFailure(String),
    #[error("point ({a}, {y}) is off the orbit (deviation {deviation:e})")]
    OffOrbit { a: f64, y: f64, deviation: f64 },
    #[error("query outside the reachable orbit: {0}")]
    OffDomain(String),
    #[error("time truncation tail {tail:e} exceeds tolerance")]
    TailBoundExceeded { tail: f64 },
    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },
    #[error("no sign change of mu - 1 found for lambda in [{lo}, {hi}]")]
    BracketFailure { lo: f64, hi: f64 },
    #[error("population cap {cap} exceeded")]
    PopulationCapExceeded { cap: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("grids do not match: {0}")]
    GridMismatch(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
