use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("value count {count} does not match shape {shape:?}")]
    ValueCount { shape: Vec<usize>, count: usize },

    #[error("singular SCM system (condition estimate {condition:.3e}, H(A) = {dagness:.6})")]
    Singular { condition: f64, dagness: f64 },

    #[error("finite-difference oracle hit a non-finite value at coordinate {index}")]
    Oracle { index: usize },

    #[error("factor {factor} = {value} outside [{min}, {max}]")]
    Domain {
        factor: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("non-finite {stage} loss: {breakdown}")]
    NonFinite { stage: &'static str, breakdown: String },

    #[error("variant {variant} does not support {what}")]
    UnsupportedVariant { variant: String, what: &'static str },

    #[error("unknown variant {0:?} (expected one of: causalvae, unsup-causalvae, nd-scadi, scadi)")]
    UnknownVariant(String),

    #[error("rounded adjacency is cyclic; refusing intervention\n{report}")]
    Cyclic { report: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
