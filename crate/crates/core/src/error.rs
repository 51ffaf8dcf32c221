use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value (shapes {shapes})")]
    NonFinite { op: &'static str, shapes: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{0}")]
    NonDeterministic(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad user input (configs, data files, arguments).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::NonDeterministic(_))
    }
}
