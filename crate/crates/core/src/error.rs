use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("joint graph is not a tree: cycle or reconvergence at link `{0}`")]
    JointCycle(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid depth value: {0}")]
    InvalidDepth(f64),

    #[error("depth buffer required but absent")]
    MissingDepth,

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("action convention mismatch: model fitted under {fitted}, data declares {given}")]
    ConventionMismatch { fitted: String, given: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("policy endpoint timed out after {0} ms")]
    Timeout(u64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
