use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Problems decoding one of the binary or JSONL file formats.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),
    #[error("file truncated: need {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("{0} unexpected trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("header dimensions overflow addressable size")]
    SizeOverflow,
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("metadata has {meta} rows but payload has {rows}")]
    MetaLengthMismatch { meta: usize, rows: usize },
    #[error("invalid metadata on line {line}: {reason}")]
    InvalidMeta { line: usize, reason: String },
    #[error("invalid header field: {0}")]
    InvalidHeader(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
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
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite gradient entry at {0}")]
    NonFiniteGradient(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("dataset needs labels for both classes: {0}")]
    SingleClass(String),
    #[error("dataset is unlabeled")]
    Unlabeled,
    #[error("dataset has zero variance; nMSE is undefined")]
    ZeroVariance,
    #[error("duplicate feature id {0}")]
    DuplicateFeature(usize),
    #[error(transparent)]
    Judge(#[from] crate::judge::JudgeError),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("classifier is bound to SAE digest {expected} but SAE has digest {actual}")]
    DigestMismatch { expected: String, actual: String },
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
}
