use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("power flow did not converge after {sweeps} sweeps (last residual {residual:e})")]
    Convergence { sweeps: usize, residual: f64 },

    #[error("rank deficiency: {message}")]
    Rank {
        message: String,
        /// Indices of rows (or columns) found to be linearly dependent.
        redundant: Vec<usize>,
    },

    #[error("numerical failure at iteration {iter}: {what}")]
    Numeric { iter: usize, what: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible inputs: {0}")]
    Compatibility(String),

    #[error("scenario {index}: {source}")]
    Scenario {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("iteration {iter}: {source}")]
    Iteration {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_scenario(self, index: usize) -> Self {
        Error::Scenario {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_iteration(self, iter: usize) -> Self {
        Error::Iteration {
            iter,
            source: Box::new(self),
        }
    }

    /// Innermost error, with scenario/iteration context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Scenario { source, .. } | Error::Iteration { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self.root() {
            Error::Argument(_) | Error::Config(_) => ErrorKind::Usage,
            Error::Convergence { .. } | Error::Rank { .. } | Error::Numeric { .. } => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}

/// Coarse classification; the discriminant is the CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorKind {
    Usage = 2,
    Data = 3,
    Numeric = 4,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        self as i32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_follow_root() {
        let e = Error::Numeric {
            iter: 3,
            what: "nan".into(),
        }
        .in_scenario(2);
        assert_eq!(e.kind(), ErrorKind::Numeric);
        assert_eq!(
            e.to_string(),
            "scenario 2: numerical failure at iteration 3: nan"
        );
        assert_eq!(Error::Config("x".into()).kind().exit_code(), 2);
        assert_eq!(Error::Shape("x".into()).kind().exit_code(), 3);
    }
}
