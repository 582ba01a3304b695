use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown vocabulary symbol {0:?}")]
    UnknownSymbol(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint block {name}: {reason}")]
    Checkpoint { name: String, reason: String },

    #[error("training diverged at epoch {epoch} step {step}: {components}")]
    Diverged {
        epoch: usize,
        step: usize,
        components: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
