use thiserror::Error;

/// Errors produced by the estimation, clustering and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A matrix that must be positive definite could not be factored.
    #[error("numerical rank failure: {0}")]
    NumericalRank(String),

    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    Convergence { iterations: usize, grad_norm: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("search space too large: {0}")]
    Size(String),

    #[error("unknown {kind}: {name}")]
    Lookup { kind: &'static str, name: String },

    /// A malformed dataset record. `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Data {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{0} unavailable without ground truth")]
    Unavailable(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
