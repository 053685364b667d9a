use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad category of an [`Error`], used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Capability,
    Numerical,
    Shape,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} in train mode needs at least 2 rows, got {got}")]
    BatchSize { op: &'static str, got: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("{0}: empty sequence")]
    EmptySequence(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape was already consumed by backward; reset it before reuse")]
    TapeFrozen,

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("configuration error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("waveform of {samples} samples is shorter than one {needed}-sample window")]
    TooShort { samples: usize, needed: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::Parameter(_) => ErrorKind::Config,
            Error::Capability(_) => ErrorKind::Capability,
            Error::NonFinite { .. } => ErrorKind::Numerical,
            Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::Truncated(_)
            | Error::Format(_)
            | Error::TooShort { .. }
            | Error::Protocol(_)
            | Error::Label { .. }
            | Error::Io { .. } => ErrorKind::Data,
            Error::Dimension { .. }
            | Error::BatchSize { .. }
            | Error::EmptySequence(_)
            | Error::NonScalarLoss(_)
            | Error::TapeFrozen => ErrorKind::Shape,
        }
    }
}
