use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in mode {mode}: {msg}")]
    Shape { mode: usize, msg: String },

    #[error("shape error: {0}")]
    Dims(String),

    #[error("mode {mode} is rank deficient: numerical rank {rank} < {cols} columns")]
    RankDeficient { mode: usize, rank: usize, cols: usize },

    #[error("value {value} outside domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("constraint error: {0}")]
    Constraint(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("rank error: column {z} requested but only {max} available")]
    Rank { z: usize, max: usize },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("numerical failure in block {block}: {msg}")]
    Numerical { block: String, msg: String },

    #[error("data error at row {row}: {msg}")]
    DataRow { row: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn numerical(block: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numerical { block: block.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
