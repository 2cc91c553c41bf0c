//! Matrix completion by nomadic, lock-free parallel SGD.
//!
//! Each worker owns a fixed block of user factors and the ratings of those
//! users. Item factors travel between workers as [`ColumnParcel`]s; only the
//! current holder of a parcel may update it, so no parameter is ever written
//! by two workers at once. The crate also carries the reference solvers
//! (serial SGD, DSGD, CCD++, ALS), the data tooling used to feed them, and the
//! metrics and wire formats shared by the command-line driver.

// `!(x > 0.0)` deliberately rejects NaN; `as f64` on `Real` is a no-op only
// without the single-precision feature.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::unnecessary_cast)]

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod nomad;
pub mod transport;

/// Scalar type for factors and ratings.
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

pub use data::{DatasetMeta, Rating, RatingEntry, ShardedRatings};
pub use error::{Error, Result};
pub use eval::{ConvergenceLog, LogRecord};
pub use model::{
    objective, partition_rows, predict, step_size, FactorMatrix, HyperParams, Partition, RegMode,
};
pub use nomad::{Balancing, Budget, CheckpointInterval, RunControl};
pub use transport::{ColumnParcel, ParcelBatch};
