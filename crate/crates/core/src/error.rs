use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("box out of image bounds: {0}")]
    OutOfBounds(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible assignment: {gts} ground-truth boxes but only {queries} queries")]
    InfeasibleAssignment { gts: usize, queries: usize },

    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    #[error("query {0} has no logit")]
    MissingLogit(usize),

    #[error("loss is not differentiable here: {0}")]
    NonDifferentiable(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("duplicate key (image_id={image_id}, phrase_id={phrase_id})")]
    DuplicateKey { image_id: String, phrase_id: String },

    #[error("join failed: {0}")]
    Join(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("region hierarchy: {0}")]
    Hierarchy(String),

    #[error("unsupported schema version {0}")]
    SchemaVersion(String),

    #[error("LLM request failed: {0}")]
    Llm(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of an external service rather than of the inputs.
    pub fn is_external(&self) -> bool {
        matches!(self, Error::Llm(_))
    }
}
