//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("format: {0}")]
    Format(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable category slug, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Corpus(_) => "corpus",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Format(_) => "format",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
