use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum E3Error {
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("unknown source `{0}`")]
    Lookup(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl E3Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, E3Error>;
