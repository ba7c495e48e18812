use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: header has no column `{column}` (mapped field {field})", path.display())]
    MissingColumn {
        path: PathBuf,
        field: String,
        column: String,
    },

    #[error("{}: zero parseable rows ({dropped} dropped)", path.display())]
    NoRows { path: PathBuf, dropped: usize },

    #[error("duplicate study ({patient_id}, {study_id})")]
    DuplicateStudy {
        patient_id: String,
        study_id: String,
    },

    #[error("patient {0} has no demographics record")]
    MissingDemographics(String),

    #[error("cannot realize split ratios with {found} patients (need at least {required})")]
    TooFewPatients { found: usize, required: usize },

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("undefined AUROC: scores need both positive and negative labels")]
    UndefinedAuroc,

    #[error("unstable bootstrap: {degenerate} of {total} resamples lacked a class")]
    UnstableBootstrap { degenerate: usize, total: usize },

    #[error("row arity {got} does not match {expected} model features")]
    ArityMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing upstream artifact {}", path.display())]
    MissingArtifact { path: PathBuf },

    #[error("malformed artifact {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad invocations or configuration rather than
    /// by the contents of the input data.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::MissingArtifact { .. } | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
