use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("failed to load {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("numeric fault{}: {msg}", stage.map(|s| format!(" at stage {s}")).unwrap_or_default())]
    Numeric { stage: Option<usize>, msg: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("image `{id}`: {source}")]
    Image {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn load(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    pub fn numeric(stage: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            stage,
            msg: msg.into(),
        }
    }

    pub fn for_image(self, id: impl Into<String>) -> Self {
        Error::Image {
            id: id.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Incompatible(_) => 2,
            Error::Load { .. }
            | Error::Format(_)
            | Error::Generation(_)
            | Error::Sampling(_)
            | Error::Input(_)
            | Error::Prompt(_)
            | Error::Shape(_)
            | Error::Io(_) => 3,
            Error::Numeric { .. } => 4,
            Error::Image { source, .. } => source.exit_code(),
            Error::Tensor(_) => 1,
        }
    }
}
