use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("dimension mismatch: {0}")]
    BadDims(String),

    #[error("non-finite value encountered: {0}")]
    Numerical(String),

    #[error("speaker {0} has no clips")]
    EmptySpeaker(String),

    #[error("no base style for speaker {0}")]
    MissingBase(String),

    #[error("zero-norm vector in {0}")]
    ZeroVector(String),

    #[error("style library is empty")]
    EmptyLibrary,

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("invalid blendshape partition: {0}")]
    BadPartition(String),

    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },

    #[error("bad pairing: {0}")]
    BadPairing(String),

    #[error("bad vertex mask: {0}")]
    BadMask(String),

    #[error("bad blendshape basis: {0}")]
    BadBasis(String),

    #[error("degenerate triangle {0}")]
    DegenerateTriangle(usize),

    #[error("linear system is singular")]
    SingularSystem,

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
