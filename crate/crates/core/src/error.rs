use std::path::PathBuf;

/// Coarse error category, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Integrity,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("{}:{line}: malformed record: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("budget underflow: need {needed} {pool} passages after filtering, only {available} available")]
    BudgetUnderflow {
        pool: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("numeric check failed: {0}")]
    Numeric(String),

    #[error("query {query_id}: {source}")]
    Query {
        query_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Io { .. } => ErrorKind::Config,
            Error::Integrity(_) | Error::Shape(_) | Error::Parse { .. } => ErrorKind::Integrity,
            Error::BudgetUnderflow { .. } => ErrorKind::Integrity,
            Error::Divergence { .. } | Error::Numeric(_) => ErrorKind::Numeric,
            Error::Query { source, .. } => source.kind(),
        }
    }

    pub(crate) fn for_query(self, query_id: &str) -> Error {
        match self {
            already @ Error::Query { .. } => already,
            other => Error::Query {
                query_id: query_id.to_string(),
                source: Box::new(other),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
