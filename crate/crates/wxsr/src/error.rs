//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WxError {
    /// Invalid configuration or parameters that violate an operation's preconditions.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array or tensor dimensions do not match the operation contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed or out-of-contract input data (bad file contents, wrong variable, ...).
    #[error("data error: {0}")]
    Data(String),

    /// No usable samples survived ingestion.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Statistics cannot be fitted (e.g. zero variance).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// A caller broke an API contract (wrong units tag, mismatched parameter sets, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values appeared where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("netcdf read error: {0}")]
    NetcdfRead(String),

    #[error("netcdf write error: {0}")]
    NetcdfWrite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, WxError>;
