use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("ragged K: query `{query_id}` has {found} responses, expected {expected}")]
    RaggedK {
        query_id: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate record for (query `{query_id}`, response {response_index})")]
    DuplicateRecord {
        query_id: String,
        response_index: usize,
    },
    #[error("query `{query_id}`: response indices must be 0..{k}")]
    ResponseIndexGap { query_id: String, k: usize },
    #[error("non-finite score for verifier `{verifier}` at (query `{query_id}`, response {response_index})")]
    NonFiniteScore {
        query_id: String,
        response_index: usize,
        verifier: String,
    },
    #[error("query `{query_id}` is only partially labeled")]
    PartialLabels { query_id: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no labels available: {0}")]
    NoLabels(String),
    #[error("empty dev set: {0}")]
    EmptyDev(String),
    #[error("no verifiers survive filtering")]
    NoVerifiersSurvive,
    #[error("degenerate moment matrix: {0}")]
    DegenerateMoments(String),
    #[error("optimizer failed on every start: {0}")]
    OptimizerFailed(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI for error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::MissingField { .. } => "missing_field",
            Error::RaggedK { .. } => "ragged_k",
            Error::DuplicateRecord { .. } => "duplicate_record",
            Error::ResponseIndexGap { .. } => "response_index_gap",
            Error::NonFiniteScore { .. } => "non_finite_score",
            Error::PartialLabels { .. } => "partial_labels",
            Error::Dimension(_) => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NoLabels(_) => "no_labels",
            Error::EmptyDev(_) => "empty_dev",
            Error::NoVerifiersSurvive => "no_verifiers_survive",
            Error::DegenerateMoments(_) => "degenerate_moments",
            Error::OptimizerFailed(_) => "optimizer_failed",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// True for errors caused by malformed input data (as opposed to I/O or usage).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::MissingField { .. }
                | Error::RaggedK { .. }
                | Error::DuplicateRecord { .. }
                | Error::ResponseIndexGap { .. }
                | Error::NonFiniteScore { .. }
                | Error::PartialLabels { .. }
                | Error::Dimension(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
