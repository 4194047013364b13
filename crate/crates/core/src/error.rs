use thiserror::Error;

/// Crate-wide error type. The CLI maps these onto process exit codes, so the
/// variant choice matters: `Usage` -> 1, data/shape/io problems -> 2,
/// numerical failures -> 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: String,
    },

    #[error("invalid argument: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    #[error("gradient check failed for {op}: max relative error {max_rel_err:.3e} ({failures} of {entries} entries over tolerance)")]
    GradCheck {
        op: String,
        max_rel_err: f64,
        failures: usize,
        entries: usize,
    },
}

impl Error {
    pub fn shape(left: &[usize], right: &[usize], context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
            context: context.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::ShapeMismatch { .. } | Error::Data(_) | Error::Io { .. } => 2,
            Error::NonFinite { .. } | Error::GradCheck { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
