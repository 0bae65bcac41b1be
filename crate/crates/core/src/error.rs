use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch, expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, dim: &'static str, expected: usize, got: usize },

    #[error("{op}: zero-sized output along {dim} (input {input}, kernel extent {extent})")]
    EmptyOutput { op: &'static str, dim: &'static str, input: usize, extent: usize },

    #[error("{op}: {what} = {count} is not divisible by {parts}")]
    Indivisible { op: &'static str, what: &'static str, count: usize, parts: usize },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("loss must be a scalar, got shape {0}")]
    NotScalar(Shape),

    #[error("input size {h}x{w} is not a multiple of {multiple}; pad to {need_h}x{need_w}")]
    InputSize { h: usize, w: usize, multiple: usize, need_h: usize, need_w: usize },

    #[error("node `{node}`: {reason}")]
    Graph { node: String, reason: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },

    #[error("checkpoint fingerprint {found:016x} does not match graph fingerprint {expected:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument { op, reason: reason.into() }
    }

    pub fn graph(node: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Graph { node: node.into(), reason: reason.into() }
    }
}
