//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map onto the process exit codes used
/// by the CLI: configuration errors exit with 2, data errors with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: inconsistent dimensions, bad presets,
    /// unknown keys, infeasible generator settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or missing input data (segment files, labels out of
    /// range, shape mismatches in batches).
    #[error("data error: {0}")]
    Data(String),

    /// An internal API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or other numerical failure states.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// k-means could not run on the given batch (e.g. fewer samples
    /// than clusters). The engine falls back to nearest-centroid
    /// assignment when it sees this.
    #[error("clustering error: {0}")]
    Clustering(String),

    /// Cluster-to-memory assignment was infeasible. The engine skips
    /// the batch for memory and trains on replay only.
    #[error("mapping error: {0}")]
    Mapping(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
