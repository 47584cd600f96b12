use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::corpus::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },

    #[error("schema error in document {doc:?}{}: {message}", cell.map(|c| format!(", cell {c}")).unwrap_or_default())]
    Schema {
        doc: String,
        cell: Option<u32>,
        message: String,
    },

    #[error("referential error in document {doc:?}: {message}")]
    Referential { doc: String, message: String },

    #[error("document {doc:?} failed validation: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid {
        doc: String,
        violations: Vec<Violation>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("load error at byte {offset}: {message}")]
    Load { offset: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn json(err: &serde_json::Error, input: &[u8]) -> Self {
        Error::Json {
            offset: byte_offset(input, err.line(), err.column()),
            message: err.to_string(),
        }
    }
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(input: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    let mut start = 0;
    for (i, &b) in input.iter().enumerate() {
        if current == line {
            break;
        }
        if b == b'\n' {
            current += 1;
            start = i + 1;
        }
    }
    (start + column.saturating_sub(1)).min(input.len())
}
