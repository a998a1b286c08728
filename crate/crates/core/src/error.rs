//! Error type shared by every module in the crate.

use std::fmt;
use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor kernels, layers, the trainer, and the I/O paths.
#[derive(Debug)]
pub enum Error {
    /// Two tensors had incompatible shapes for the requested operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single tensor had a shape the operation cannot accept.
    InvalidShape { op: &'static str, detail: String },
    /// An input row was numerically degenerate (e.g. zero-norm feature).
    DegenerateInput {
        op: &'static str,
        row: usize,
        norm: f64,
    },
    /// A parameter value violated its constraint (e.g. non-positive scale).
    InvalidParameter {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },
    /// A class label was outside `[0, num_classes)`.
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    /// `backward` was called without a preceding `forward`.
    BackwardBeforeForward { layer: &'static str },
    /// A network, training, or bound configuration failed validation.
    InvalidConfig { detail: String },
    /// A data file had the wrong magic, length, or layout.
    DataFormat { path: String, detail: String },
    /// A checkpoint file could not be decoded.
    CheckpointFormat { detail: String },
    /// Underlying I/O failure.
    Io { path: String, source: io::Error },
    /// Training hit a non-finite loss and aborted.
    NumericAbort { iteration: u64, detail: String },
    /// Not enough samples or pairs to satisfy a request.
    InsufficientData { detail: String },
    /// A pair file referenced a sample id absent from the feature set.
    UnknownId { id: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch, lhs={lhs:?} rhs={rhs:?}")
            }
            Self::InvalidShape { op, detail } => write!(f, "{op}: invalid shape, {detail}"),
            Self::DegenerateInput { op, row, norm } => {
                write!(f, "{op}: degenerate input at row {row} (norm {norm:e})")
            }
            Self::InvalidParameter {
                name,
                value,
                constraint,
            } => write!(f, "invalid parameter {name}={value}: requires {constraint}"),
            Self::LabelOutOfRange {
                index,
                label,
                num_classes,
            } => write!(
                f,
                "label {label} at index {index} out of range for {num_classes} classes"
            ),
            Self::BackwardBeforeForward { layer } => {
                write!(f, "{layer}: backward called before forward")
            }
            Self::InvalidConfig { detail } => write!(f, "invalid configuration: {detail}"),
            Self::DataFormat { path, detail } => write!(f, "bad data file {path}: {detail}"),
            Self::CheckpointFormat { detail } => write!(f, "bad checkpoint: {detail}"),
            Self::Io { path, source } => write!(f, "i/o error on {path}: {source}"),
            Self::NumericAbort { iteration, detail } => {
                write!(f, "non-finite loss at iteration {iteration}; {detail}")
            }
            Self::InsufficientData { detail } => write!(f, "insufficient data: {detail}"),
            Self::UnknownId { id } => write!(f, "unknown sample id {id:?}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
