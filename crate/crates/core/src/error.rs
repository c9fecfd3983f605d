use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(
        "answer span mismatch in dialog {dialog_id} turn {turn_index}: \
         expected {expected:?}, passage slice is {found:?}"
    )]
    SpanMismatch {
        dialog_id: String,
        turn_index: usize,
        expected: String,
        found: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("turn {k} out of range for dialog with {turns} turns")]
    TurnOutOfRange { k: usize, turns: usize },

    #[error("duplicate history turn {0}")]
    DuplicateHistoryTurn(usize),

    #[error("passage is empty after tokenization")]
    EmptyPassage,

    #[error("token id {id} out of range for table with {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("window without a gold span reached the loss")]
    DroppedLabel,

    #[error("no valid answer span in any window")]
    NoValidSpan,

    #[error("every training window was dropped: gold spans never fit inside a window; raise max_seq_len or doc_stride overlap")]
    AllWindowsDropped,

    #[error("checkpoint version {found} is not supported (this build reads up to {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("missing human F1 for turns: {0}")]
    MissingHumanF1(String),

    #[error("prediction mismatch: {0}")]
    Predictions(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
