use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("lexicon error: no entry covers slot `{slot}`")]
    Lexicon { slot: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("state error: {0}")]
    State(String),
    #[error("lookup error: profile id {0} not found in embedding file")]
    Lookup(u64),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Validation failures exit with 1, everything else with 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Lexicon { .. }
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::Json(_)
            | Error::Lookup(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
