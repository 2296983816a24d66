use alloc::string::String;

/// Crate-wide error type. Variants correspond to contract violations the
/// caller can act on; internal numerical issues surface as diagnostics in the
/// respective result structs instead.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty mesh where a non-empty mesh is required")]
    EmptyMesh,

    #[error("empty point set where a non-empty set is required")]
    EmptyPointSet,

    #[error("camera origin {0:?} lies inside the field bounding box")]
    CameraInsideBbox([f64; 3]),

    #[error("mesh topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("checkpoint decode failed: {0}")]
    CheckpointFormat(String),

    #[error("optimization aborted: {0}")]
    OptimizationAborted(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
