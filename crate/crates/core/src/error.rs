use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid packed genotype file {path}: bad magic bytes {found:02x?}")]
    BadMagic { path: PathBuf, found: [u8; 2] },

    #[error("invalid packed genotype file {path}: mode byte {mode:#04x} (only variant-major 0x01 is supported)")]
    BadMode { path: PathBuf, mode: u8 },

    #[error("truncated packed genotype file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("parse error in {file} at row {row}: {message}")]
    Parse {
        file: String,
        row: usize,
        message: String,
    },

    #[error("non-finite linear predictor at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("design matrix is rank deficient; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("matrix block {block} is not positive definite after jitter repair")]
    NotPositiveDefinite { block: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("schema mismatch: expected output of stage `{expected}`, found `{found}`")]
    Schema { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(file: impl Into<String>, row: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            row,
            message: message.into(),
        }
    }
}
