use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    Vocabulary { id: usize, vocab_size: usize },

    #[error("label {label} out of range for {num_labels} labels")]
    Label { label: usize, num_labels: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}: contrastive={contrastive}, classification={classification}")]
    NanLoss {
        step: usize,
        contrastive: f64,
        classification: f64,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checksum mismatch in {file} (first bad block at byte offset {offset})")]
    Checksum { file: String, offset: u64 },

    #[error("{file}: expected {expected} bytes, found {actual}")]
    Length {
        file: String,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported format version {found:?} (supported: {supported})")]
    Version { found: String, supported: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("malformed file {file}: {reason}")]
    Format { file: String, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures caused by the caller's inputs (configs, paths, files)
    /// rather than by the library itself.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Io { .. }
                | Error::Checksum { .. }
                | Error::Length { .. }
                | Error::Version { .. }
                | Error::Dimension(_)
                | Error::Format { .. }
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Vocabulary { .. }
                | Error::Label { .. }
        )
    }
}
