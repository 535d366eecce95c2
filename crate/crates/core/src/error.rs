use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid velocity grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("the discrete-velocity collision table needs a uniform velocity lattice")]
    NeedsUniformGrid,

    #[error("velocity {0:?} lies outside the interpolation range of the lattice")]
    OffGrid([f64; 3]),

    #[error("negative density {value:e} at index {index}")]
    NegativeDensity { index: usize, value: f64 },

    #[error("right-hand side is not orthogonal to the collision invariants (violation {0:e})")]
    NotOrthogonal(f64),

    #[error("iteration did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("assembled operator is not symmetric (defect {0:e})")]
    Asymmetric(f64),

    #[error("spectral gap estimate {0:e} is not positive")]
    NonPositiveGap(f64),

    #[error("time step {dt:e} violates the CFL bound {limit:e}")]
    Cfl { dt: f64, limit: f64 },

    #[error("velocity field is not divergence free (residual {0:e})")]
    Divergence(f64),

    #[error("non-finite value at step {step} (state dumped to {dump:?})")]
    NonFinite { step: usize, dump: Option<PathBuf> },

    #[error("positivity could not be restored by halving the step {halvings} times")]
    Positivity { halvings: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
