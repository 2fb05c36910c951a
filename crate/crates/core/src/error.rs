use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unit out of range: layer {layer}, unit {unit}")]
    UnitOutOfRange { layer: usize, unit: usize },

    #[error("enumeration needs 2^{latent} configurations; at most {cap} latent units are supported")]
    EnumerationCap { latent: usize, cap: usize },

    #[error("coordinate {0} has an identically zero score; no baseline is defined")]
    DegenerateCoordinate(usize),

    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),

    #[error("format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite gradient at {coordinate} (value {value})")]
    NonFinite { coordinate: String, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::UnitOutOfRange { .. } => "unit-out-of-range",
            Error::EnumerationCap { .. } => "enumeration-cap",
            Error::DegenerateCoordinate(_) => "degenerate-coordinate",
            Error::UnknownEstimator(_) => "unknown-estimator",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "non-finite",
            Error::Io { .. } => "io",
        }
    }
}
