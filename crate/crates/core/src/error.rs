use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("negative sampling failed: {0}")]
    Sampling(String),

    #[error("tape contract violated: {0}")]
    Contract(String),

    #[error("parse error at byte {offset}: {kind}")]
    Parse { offset: usize, kind: ParseErrorKind },

    #[error("{path}:{line}: {msg}")]
    ConfigLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (image ids {image_ids:?}, text ids {text_ids:?})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        image_ids: Vec<usize>,
        text_ids: Vec<usize>,
    },

    #[error("gradient check failed for groups: {0}")]
    GradCheck(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic,
    UnsupportedVersion(u32),
    UnknownModality(u16),
    Truncated { needed: usize, available: usize },
    TrailingBytes(usize),
    LengthInconsistent(String),
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::BadMagic => write!(f, "bad magic bytes"),
            ParseErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            ParseErrorKind::UnknownModality(m) => write!(f, "unknown modality tag {m}"),
            ParseErrorKind::Truncated { needed, available } => {
                write!(f, "truncated: need {needed} bytes, {available} available")
            }
            ParseErrorKind::TrailingBytes(n) => write!(f, "{n} trailing bytes after payload"),
            ParseErrorKind::LengthInconsistent(msg) => write!(f, "inconsistent length: {msg}"),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Input(_) => "input",
            Error::Config(_) | Error::ConfigLine { .. } => "config",
            Error::Sampling(_) => "sampling",
            Error::Contract(_) => "contract",
            Error::Parse { .. } => "parse",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::GradCheck(_) => "grad-check",
            Error::Io { .. } => "io",
        }
    }
}
