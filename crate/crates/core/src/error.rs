//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// A scene spec, config file, or run config failed validation.
    InvalidConfig(String),
    /// A genotype, ledger, or search state violated a structural invariant.
    InvalidState(String),
    /// Tensor or map dimensions do not line up.
    ShapeMismatch(String),
    /// An argument was outside its documented domain.
    Domain(String),
    /// A metric or loss was asked to average over zero valid pixels.
    EmptyMask,
    /// Non-finite values where finite ones are required.
    NonFinite(String),
    /// Checkpoint is missing, corrupt, or from an incompatible version.
    Checkpoint(String),
    /// Text document (genotype, ledger, trace, config) failed to parse.
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            Error::InvalidState(m) => write!(f, "invalid state: {m}"),
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::EmptyMask => write!(f, "no valid pixels under mask"),
            Error::NonFinite(m) => write!(f, "non-finite values: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Stable machine-readable kind tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidState(_) => "invalid_state",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Domain(_) => "domain",
            Error::EmptyMask => "empty_mask",
            Error::NonFinite(_) => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
