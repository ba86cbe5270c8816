use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for extent {extent} in {what}")]
    Index {
        what: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("backward pass: {0}")]
    Backward(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("model family mismatch: {0}")]
    Family(String),
    #[error("checksum mismatch: {0}")]
    Checksum(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
    Integrity,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. }
            | Error::Index { .. }
            | Error::Config(_)
            | Error::Family(_)
            | Error::Empty(_) => ErrorKind::Validation,
            Error::Checksum(_) | Error::Format { .. } => ErrorKind::Integrity,
            Error::Backward(_) | Error::NonFinite(_) | Error::Io(_) => ErrorKind::Runtime,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
