// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use cart_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {term}: {value}")]
    NonFinite { term: String, value: f64 },
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CoreError::NonFinite {
            term: term.to_string(),
            value,
        })
    }
}
