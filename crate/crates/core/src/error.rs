//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("unknown class id {class_id}: only {available} procedural primitives available")]
    UnknownClass { class_id: usize, available: usize },

    #[error(
        "domain shift left {remaining} points (minimum {minimum}); loosen occlusion or drop settings"
    )]
    ShiftTooAggressive { remaining: usize, minimum: usize },

    #[error("{path}:{line}: malformed point line: {reason}")]
    MalformedXyz {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("no points found in {path}")]
    EmptyXyz { path: String },

    #[error("non-finite gradient while building the saliency map for sample {sample_id}")]
    NonFiniteSaliency { sample_id: u64 },

    #[error("selection needs at least {minimum} records, got {got}")]
    BatchTooSmall { minimum: usize, got: usize },

    #[error("length mismatch for {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("series for {what} too short: {got} < {minimum}")]
    SeriesTooShort {
        what: &'static str,
        got: usize,
        minimum: usize,
    },

    #[error("zero-variance input to {what}")]
    DegenerateInput { what: &'static str },

    #[error("empty batch for {what}")]
    EmptyBatch { what: &'static str },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("checkpoint version {found} unsupported, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error("csv error at line {line}: {reason}")]
    Csv { line: usize, reason: String },

    #[error("missing run files: {0:?}")]
    MissingFiles(Vec<String>),
}

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
