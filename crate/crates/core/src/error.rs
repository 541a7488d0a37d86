use std::path::PathBuf;

/// Errors raised while reading checkpoint and dataset files.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: Vec<u8> },
    #[error("unsupported format version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },
    #[error("shape mismatch for parameter `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("index {index} out of bounds for {what} of length {len}")]
    OutOfBounds {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("objective is not deterministic: {first} then {second} at identical parameters")]
    Nondeterministic { first: f64, second: f64 },
    #[error("all accumulated gate weights are zero; selection ratios are undefined")]
    DegenerateGates,
    #[error("loss became non-finite ({loss}) at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("training diverged at epoch {epoch}, step {step}: {cause}")]
    Diverged { epoch: usize, step: usize, cause: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("frozen parameters changed: {0:?}")]
    FrozenViolation(Vec<String>),
    #[error("wrong tuning mode: {0}")]
    Mode(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            source,
        }
    }

    /// The underlying file-format error, if this is one.
    pub fn format_error(&self) -> Option<&FormatError> {
        match self {
            Error::Format { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
