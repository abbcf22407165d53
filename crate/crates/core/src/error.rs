use thiserror::Error;

use crate::tensor::MomentKind;

pub type Result<T> = std::result::Result<T, PfpError>;

#[derive(Debug, Error)]
pub enum PfpError {
    #[error("invariant violated at element {index}: mean={mean}, spread={spread} ({kind:?})")]
    InvariantViolation {
        index: usize,
        mean: f32,
        spread: f32,
        kind: MomentKind,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("representation mismatch: expected {expected}, found {found}")]
    RepresentationMismatch { expected: String, found: String },

    #[error("window size {k} does not divide spatial dims {h}x{w}")]
    ShapeIndivisible { k: usize, h: usize, w: usize },

    #[error("unsupported convolution geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("auroc needs at least one score in each class")]
    EmptyClass,

    #[error("calibration factor must be positive, got {0}")]
    NonPositiveFactor(f32),

    #[error("invalid kernel config: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("representation contract violated at layer {layer}: {reason}")]
    Contract { layer: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PfpError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        PfpError::ShapeMismatch(msg.into())
    }

    pub(crate) fn repr(expected: impl std::fmt::Display, found: impl std::fmt::Display) -> Self {
        PfpError::RepresentationMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
