use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config encode error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl FlabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            FlabError::Config(_) | FlabError::TomlDe(_) | FlabError::TomlSer(_) => 2,
            FlabError::Lookup(_) => 2,
            FlabError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FlabError::Config(msg.into()))
}

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FlabError::Input(msg.into()))
}
