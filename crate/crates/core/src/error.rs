use std::path::PathBuf;

use thiserror::Error;

use crate::table::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("column has no non-null cells")]
    EmptyColumn,

    #[error("schema error: {0}")]
    Schema(String),

    #[error("query column `{query_column}` has more than one match in table `{table}`")]
    DuplicateAlignment { query_column: String, table: String },

    #[error("dimension domain is empty (all cells null)")]
    EmptyDomain,

    #[error("dtype mismatch: {0:?} vs {1:?}")]
    DtypeMismatch(DType, DType),

    #[error("cannot merge {0} statistics with {1} statistics")]
    FamilyMismatch(&'static str, &'static str),

    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("no valid visualization plans for this input")]
    NoValidPlans,
}

impl Error {
    /// Stable machine-readable code, used in CLI exit reporting and HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Parse(_) => "ParseError",
            Error::EmptyColumn => "EmptyColumn",
            Error::Schema(_) => "SchemaError",
            Error::DuplicateAlignment { .. } => "DuplicateAlignment",
            Error::EmptyDomain => "EmptyDomain",
            Error::DtypeMismatch(..) => "DtypeMismatch",
            Error::FamilyMismatch(..) => "FamilyMismatch",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::Domain(_) => "DomainError",
            Error::InvalidPlan(_) => "InvalidPlan",
            Error::NoValidPlans => "NoValidPlans",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
