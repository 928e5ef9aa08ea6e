//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes for an operation. `rhs` is empty for unary ops.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        detail: String,
    },
    /// Invalid value fed to an operation (labels outside {0,1}, empty softmax row, ...).
    Invalid { op: &'static str, detail: String },
    /// Bad model or experiment configuration.
    Config(String),
    /// Dataset parsing or lookup failure.
    Data(String),
    /// Metric is undefined on the given inputs (e.g. single-class AUC).
    Metric(String),
    /// Training aborted (NaN loss and similar).
    Train(String),
    /// Checkpoint encode/decode failure.
    Checkpoint(String),
    /// Operation not available for this architecture.
    Unsupported(String),
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn shape_mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            detail: String::new(),
        }
    }

    pub fn bad_shape(op: &'static str, shape: &[usize], detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: Vec::new(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                op,
                lhs,
                rhs,
                detail,
            } => {
                if rhs.is_empty() {
                    write!(f, "{op}: invalid shape {lhs:?}")?;
                } else {
                    write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")?;
                }
                if !detail.is_empty() {
                    write!(f, " ({detail})")?;
                }
                Ok(())
            }
            Error::Invalid { op, detail } => write!(f, "{op}: {detail}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Metric(msg) => write!(f, "metric undefined: {msg}"),
            Error::Train(msg) => write!(f, "training failure: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Unsupported(msg) => write!(f, "unsupported: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
