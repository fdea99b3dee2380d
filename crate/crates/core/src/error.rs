use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("example `{id}`: field `{field}`: {reason}")]
    Invalid {
        id: String,
        field: String,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Serialize(#[from] serde_json::Error),

    #[error("dataset collection is empty")]
    EmptyCollection,

    #[error("no items to evaluate")]
    EmptyItems,

    #[error("confidence {0} is outside [0, 1]")]
    ConfidenceOutOfRange(f64),

    #[error("gold index {index} out of range for {len} candidates")]
    GoldIndexOutOfRange { index: usize, len: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("no usable examples for fitting ({skipped} skipped without a gold candidate)")]
    NoUsableExamples { skipped: usize },

    #[error("training labels contain a single class; logistic fit is degenerate")]
    SingleLabel,

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("feature row has {got} columns, model expects {expected}")]
    FeatureCount { expected: usize, got: usize },

    #[error("scorer has no log-probability for token `{token}` after prefix [{prefix}]")]
    ScorerMissing { token: String, prefix: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("misaligned collections: {0}")]
    Misaligned(String),
}

impl Error {
    pub(crate) fn invalid(id: &str, field: &str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            id: id.to_string(),
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
