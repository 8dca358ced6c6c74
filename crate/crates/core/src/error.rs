use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite value at pixel {pixel}, band {band}")]
    NonFinite { pixel: usize, band: usize },

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("covariance of order {order} is singular (numerical rank {rank}); pass a positive ridge")]
    Singular { order: usize, rank: usize },

    #[error("precision residual {residual:e} exceeds 1e-6 (order {order}); increase the ridge")]
    IllConditioned { order: usize, residual: f64 },

    #[error("background statistics carry no precision matrix")]
    MissingPrecision,

    #[error("graph model has no eigensystem; call eigendecompose first")]
    MissingEigensystem,

    #[error("model construction failed: {0}")]
    Model(String),

    #[error("eigen-component {index} has eigenvalue {value:e} at or below tolerance; choose p < {index}")]
    Truncation { index: usize, value: f64 },

    #[error("eigensolver failed on a matrix of order {order}")]
    Eigen { order: usize },

    #[error("topology mismatch: {0}")]
    Topology(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("class {class} has no pixels in the source labels")]
    EmptyClass { class: u32 },

    #[error("mask layout of {needed_rows}x{needed_cols} does not fit in {rows}x{cols}")]
    LayoutTooLarge {
        needed_rows: usize,
        needed_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("payload length mismatch in {path}: expected {expected} bytes, found {actual}")]
    PayloadLength {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable code, used in the CLI's JSON error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Parameter { .. } => "parameter",
            Error::Singular { .. } => "singular",
            Error::IllConditioned { .. } => "ill_conditioned",
            Error::MissingPrecision => "missing_precision",
            Error::MissingEigensystem => "missing_eigensystem",
            Error::Model(_) => "model",
            Error::Truncation { .. } => "truncation",
            Error::Eigen { .. } => "eigen",
            Error::Topology(_) => "topology",
            Error::Undefined(_) => "undefined",
            Error::EmptyClass { .. } => "empty_class",
            Error::LayoutTooLarge { .. } => "layout",
            Error::PayloadLength { .. } => "payload_length",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
