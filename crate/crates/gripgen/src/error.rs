//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rig: {0}")]
    InvalidRig(String),

    #[error("invalid pose vector: expected length {expected}, got {got}")]
    PoseLength { expected: usize, got: usize },

    #[error("mesh is disconnected: {components} components (sizes {sizes:?})")]
    DisconnectedMesh { components: usize, sizes: Vec<usize> },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepRange { t: usize, max: usize },

    #[error("grasp closure failed: {0}")]
    ClosureFailed(String),

    #[error("sequence is entirely silent; nothing left after clipping")]
    AllSilent,

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
