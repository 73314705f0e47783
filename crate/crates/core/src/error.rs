use std::path::PathBuf;

use thiserror::Error;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("cohort is empty")]
    EmptyCohort,

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("infeasible offset: {0}")]
    InfeasibleOffset(String),

    #[error("enumeration needs {required} multisets but the cap is {cap}")]
    EnumerationTooLarge { required: u128, cap: u128 },

    #[error("normalization error: zero diagonal in column `{column}`")]
    Normalization { column: String },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("instance `{instance_id}` failed: {source}")]
    Instance {
        instance_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } | Error::Argument(_) => ErrorClass::Config,
            Error::Schema(_)
            | Error::Parse { .. }
            | Error::EmptyCohort
            | Error::Lookup(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorClass::Data,
            Error::InfeasibleOffset(_)
            | Error::EnumerationTooLarge { .. }
            | Error::Normalization { .. }
            | Error::NonFinite { .. } => ErrorClass::Numerical,
            Error::Instance { source, .. } => source.class(),
            Error::File { .. } | Error::Io(_) => ErrorClass::Io,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
