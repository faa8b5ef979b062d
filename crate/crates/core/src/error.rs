use std::fmt;
use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One rejected metadata record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordIssue {
    /// 1-based line number in the source file, 0 when not file-backed.
    pub line: usize,
    pub query_id: String,
    pub message: String,
}

impl fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {} ({}): {}", self.line, self.query_id, self.message)
        } else {
            write!(f, "{}: {}", self.query_id, self.message)
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("malformed descriptor file: {0}")]
    MalformedHeader(String),

    #[error("non-finite value in descriptor {id:?} at column {column}")]
    NonFinite { id: String, column: usize },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("descriptor dimension {dim} exceeds the configured maximum of {max}")]
    DimTooLarge { dim: usize, max: usize },

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("duplicate candidate pair ({query}, {reference})")]
    DuplicatePair { query: String, reference: String },

    #[error("non-finite score for pair ({query}, {reference})")]
    NonFiniteScore { query: String, reference: String },

    #[error("{} invalid metadata record(s); first: {}", .0.len(), .0.first().map(|i| i.to_string()).unwrap_or_default())]
    InvalidMetadata(Vec<RecordIssue>),

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("reference set is empty")]
    EmptyReferenceSet,

    #[error("query {0:?} has no ground-truth match")]
    NotInGroundTruth(String),

    #[error("candidates span several queries ({0:?} and {1:?})")]
    MixedQueries(String, String),

    #[error("total_positives = {total} but {found} distinct true pairs are present")]
    TotalPositives { total: usize, found: usize },

    #[error("cannot average over an empty set of queries")]
    EmptySubset,

    #[error("query {0:?} has an AP value but no metadata")]
    MissingMetadata(String),

    #[error("automatic query {0:?} has no transformation steps")]
    NoSteps(String),

    #[error("underdetermined fit: {rows} rows for {cols} columns with lambda = 0")]
    Underdetermined { rows: usize, cols: usize },

    #[error("normal equations are singular (lambda = 0)")]
    SingularSystem,

    #[error("zero vector after background subtraction for {} id(s): {:?}", .0.len(), .0)]
    DegenerateVectors(Vec<String>),

    #[error("zero mean background distance for {} id(s): {:?}", .0.len(), .0)]
    ZeroBackgroundDistance(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(source_name: impl fmt::Display, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.to_string(),
            line,
            message: message.into(),
        }
    }

    /// Whether the error stems from bad input (files, ids, flags) rather
    /// than from the computation itself.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::SingularSystem
                | Error::Underdetermined { .. }
                | Error::DegenerateVectors(_)
                | Error::ZeroBackgroundDistance(_)
        )
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader(_) => "malformed_header",
            Error::NonFinite { .. } => "non_finite",
            Error::DuplicateId(_) => "duplicate_id",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::DimTooLarge { .. } => "dim_too_large",
            Error::Parse { .. } => "parse",
            Error::DuplicatePair { .. } => "duplicate_pair",
            Error::NonFiniteScore { .. } => "non_finite_score",
            Error::InvalidMetadata(_) => "invalid_metadata",
            Error::UnknownId(_) => "unknown_id",
            Error::EmptyReferenceSet => "empty_reference_set",
            Error::NotInGroundTruth(_) => "not_in_ground_truth",
            Error::MixedQueries(..) => "mixed_queries",
            Error::TotalPositives { .. } => "total_positives",
            Error::EmptySubset => "empty_subset",
            Error::MissingMetadata(_) => "missing_metadata",
            Error::NoSteps(_) => "no_steps",
            Error::Underdetermined { .. } => "underdetermined",
            Error::SingularSystem => "singular_system",
            Error::DegenerateVectors(_) => "degenerate_vectors",
            Error::ZeroBackgroundDistance(_) => "zero_background_distance",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Json(_) => "json",
        }
    }
}
