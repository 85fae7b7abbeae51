use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature did not converge: error estimate {estimate:e} exceeds tolerance {tolerance:e}")]
    NonConvergence { estimate: f64, tolerance: f64 },

    /// The target epsilon is not enclosed by the sigma search interval.
    #[error("target eps {target} not bracketed: eps(lo={lo}) = {eps_lo}, eps(hi={hi}) = {eps_hi}")]
    Bracket {
        target: f64,
        lo: f64,
        hi: f64,
        eps_lo: f64,
        eps_hi: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: bad magic {found:#010x} at offset 0, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: file truncated at offset {offset}, needed {needed} more bytes")]
    TruncatedFile {
        path: PathBuf,
        offset: u64,
        needed: u64,
    },

    #[error("{path}: item count {found} at offset 4 does not match {expected} in the companion file")]
    CountMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
