use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A record parsed but broke one of its domain invariants.
    #[error("prompt {prompt_id}: invalid {field}: {detail}")]
    Invariant {
        prompt_id: String,
        field: String,
        detail: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient raters: need at least 3 ratings, got {0}")]
    InsufficientRaters(usize),

    #[error("text must be non-empty")]
    EmptyText,

    #[error("scoring pair ({i}, {j}) of prompt {prompt_id}: {source}")]
    Scorer {
        prompt_id: String,
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("rank deficient design: collinear columns {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("missing {metric} matrix for prompt {prompt_id}")]
    MissingMatrix { prompt_id: String, metric: String },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn invariant(
        prompt_id: impl Into<String>,
        field: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Invariant {
            prompt_id: prompt_id.into(),
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is attributable to the caller's inputs rather than
    /// to a defect in this crate. The CLI maps this to its exit code.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Internal(_))
    }
}
