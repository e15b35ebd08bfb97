//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by graph ingestion, partitioning, execution and training.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("node id {id} out of range (N = {bound})")]
    NodeRange { id: u64, bound: u64 },

    #[error("duplicate entry for node {id} at {path}:{line}")]
    Duplicate { path: String, line: usize, id: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("edge ({src}, {dst}) does not exist")]
    NoSuchEdge { src: u32, dst: u32 },

    #[error("partition count {p} out of range [1, {n}]")]
    PartitionRange { p: usize, n: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, CoreError>;
