use std::path::PathBuf;

use crate::tensor_io::WeightRef;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure category, used for CLI exit codes and the C ABI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Bundle,
    Numerical,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Bundle => "bundle",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Io => "io",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),

    #[error("tensor `{name}`: payload is {actual} bytes, expected {expected}")]
    ByteLength {
        name: String,
        expected: u64,
        actual: u64,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    #[error("tensor `{name}`: shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("{0} out of range")]
    OutOfRange(String),

    #[error("unknown head class `{0}`")]
    UnknownClass(String),

    #[error("malformed head id `{0}`")]
    MalformedHeadId(String),

    #[error("malformed annotations: {0}")]
    MalformedAnnotations(String),

    #[error("malformed pattern dump: {0}")]
    MalformedPatterns(String),

    #[error("rank deficient: numerical rank {rank} < {expected}{}", weight.map(|w| format!(" for {w}")).unwrap_or_default())]
    RankDeficient {
        rank: usize,
        expected: usize,
        weight: Option<WeightRef>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            MissingManifest(_)
            | MalformedManifest { .. }
            | UnknownDtype(_)
            | ByteLength { .. }
            | MissingTensor(_)
            | DuplicateTensor(_)
            | ShapeMismatch { .. }
            | InvalidConfig(_)
            | UnknownClass(_)
            | MalformedHeadId(_)
            | MalformedAnnotations(_)
            | MalformedPatterns(_) => ErrorCategory::Bundle,
            RankDeficient { .. } | DimensionMismatch(_) | Degenerate(_) => {
                ErrorCategory::Numerical
            }
            OutOfRange(_) | InvalidArgument(_) => ErrorCategory::Usage,
            Io { .. } | Serialization(_) => ErrorCategory::Io,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
