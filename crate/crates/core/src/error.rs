//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by loading, geometry checks, and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadMismatch { expected: usize, found: usize },

    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),

    #[error("unsupported NIfTI feature: {0}")]
    UnsupportedNifti(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("patch size mismatch: {0} vs {1} values")]
    PatchSizeMismatch(usize, usize),

    #[error("metric arity mismatch: weights have {weights}, table has {table}")]
    ArityMismatch { weights: usize, table: usize },

    #[error("instance too large for exact solve: {0} labelings")]
    InstanceTooLarge(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class {0} missing from weight set")]
    MissingClass(u8),

    #[error("objective became non-finite during optimization")]
    NonFiniteObjective,

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
