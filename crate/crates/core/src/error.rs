use std::path::PathBuf;

/// Errors produced by the solver library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature of exactness {requested} requested; the maximum supported is {max}")]
    QuadratureDegree { requested: usize, max: usize },

    #[error("cell index {index} out of range for a mesh with {len} cells")]
    CellOutOfRange { index: usize, len: usize },

    #[error("operands live on different discrete spaces")]
    SpaceMismatch,

    #[error("advection term requested while advection is disabled")]
    AdvectionDisabled,

    #[error("Newton iteration did not converge after {iterations} iterations (residual norm {residual:.3e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("linear solver failed in Newton step {step}: relative residual {achieved:.3e} after {iterations} iterations")]
    LinearStagnation {
        step: usize,
        achieved: f64,
        iterations: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the nonlinear or linear solvers.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NewtonDivergence { .. } | Error::LinearStagnation { .. } | Error::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
