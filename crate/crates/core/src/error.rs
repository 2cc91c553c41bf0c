use std::time::Duration;

use thiserror::Error;

use crate::transport::WireError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("non-finite value passed to {0}")]
    NonFinite(&'static str),

    #[error("singular normal equation for {context}: no ratings and lambda = 0")]
    Singular { context: String },

    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("zero diagonal entry m_ll at coordinate {0}")]
    ZeroDiagonal(usize),

    #[error("residual matrix out of sync with factors (max drift {0:e})")]
    InconsistentResidual(f64),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: duplicate rating for (user {user}, item {item}), first seen on line {first}")]
    Duplicate {
        line: usize,
        first: usize,
        user: u32,
        item: u32,
    },

    #[error("dataset format: {0}")]
    Format(String),

    #[error("infeasible degree sequence: {0}")]
    Infeasible(String),

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("throughput undefined: {0}")]
    Throughput(String),

    #[error(transparent)]
    Wire(#[from] WireError),

    #[error("peer {0} disconnected")]
    PeerDisconnected(usize),

    #[error("handshake rejected: {0}")]
    Handshake(String),

    #[error("transport: {0}")]
    Transport(String),

    #[error("checkpoint barrier not reached within {0:?}")]
    BarrierTimeout(Duration),

    #[error("parcel conservation violated: {0}")]
    Conservation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
