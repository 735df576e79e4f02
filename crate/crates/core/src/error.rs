use std::path::PathBuf;

/// Errors raised across the pipeline.
///
/// Variants are grouped so the CLI can map them onto its exit codes
/// (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("training aborted: {0}")]
    TrainingAbort(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 config, 3 data,
    /// 4 training abort, 5 evaluation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Image { .. } | Error::Data(_) | Error::Json { .. } => 3,
            Error::NonFinite { .. } | Error::TrainingAbort(_) | Error::Checkpoint(_) => 4,
            Error::Evaluation(_) => 5,
            Error::Tensor(_) | Error::Shape(_) | Error::InvalidInput(_) => 4,
        }
    }
}
