//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A text input could not be parsed; carries the 1-based line number.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Shapes or index ranges do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A parameter is outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Stationary/spectral analysis requires an irreducible chain.
    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    /// An iteration failed to reach its tolerance; carries the last residual.
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Numerical breakdown: NaN propagation, loss blow-up, singular solves.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the computation itself rather than of its inputs.
    /// The CLI maps these to exit code 2, everything else to exit code 1.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Disconnected { .. } | Error::NoConvergence { .. } | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
