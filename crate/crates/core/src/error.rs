use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("singular linearization: zero voltage at node {node}")]
    SingularLinearization { node: usize },

    #[error("power flow diverged after {iterations} iterations (mismatch {mismatch:.3e})")]
    Divergence { iterations: usize, mismatch: f64 },

    #[error("observability error: {0}")]
    Observability(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stale measurement: taken at step {measured}, control step is {current}")]
    StaleMeasurement { measured: u64, current: u64 },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("solver failed with status {status}: max KKT residual {residual:.3e}")]
    Solver { status: String, residual: f64 },

    #[error("invalid QP: {0}")]
    InvalidQp(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
