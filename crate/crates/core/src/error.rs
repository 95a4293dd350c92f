//! Error types shared across the solver stack.

use thiserror::Error;

/// Crate-wide error type. Variants map 1:1 onto CLI exit codes, see
/// [`Error::exit_code`].
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid grid or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Expression or config file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Invalid argument combination at an API boundary.
    #[error("argument error: {0}")]
    Argument(String),

    /// Out-of-triangle or out-of-range index.
    #[error("index error: {0}")]
    Index(String),

    /// Problem data violates a structural requirement (ellipticity, shape).
    #[error("model error: {0}")]
    Model(String),

    /// A linear algebra or stepping kernel failed.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Fixed-point iteration failed on the minimal window.
    #[error("iteration did not converge: {0}")]
    NonConvergence(String),

    /// Manufactured-solution construction failed.
    #[error("manufacture error: {0}")]
    Manufacture(String),

    /// Two quantities that must agree do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable process exit code for each failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse(_) => 3,
            Error::Argument(_) => 4,
            Error::Index(_) => 5,
            Error::Model(_) => 65,
            Error::Numerical(_) => 66,
            Error::NonConvergence(_) => 67,
            Error::Manufacture(_) => 68,
            Error::Consistency(_) => 69,
            Error::Io(_) => 74,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
