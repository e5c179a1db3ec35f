use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: degenerate batch: {detail}")]
    DegenerateBatch { op: &'static str, detail: String },

    #[error("parameter {0} is not on the tape")]
    Disconnected(String),

    #[error("newton whitening diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error(
        "eigensolver did not converge after {sweeps} sweeps (condition estimate {condition:e})"
    )]
    EigenNonConvergence { sweeps: usize, condition: f64 },

    #[error("finite difference at coordinate {input}[{index}] is not finite")]
    NonFinitePerturbation { input: usize, index: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: u64,
        last_finite: Option<Box<crate::engine::StepMetrics>>,
    },

    #[error("no checkpoint for {0}")]
    MissingCheckpoint(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Dataset(#[from] DatasetError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DegenerateBatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Checkpoint container failures. Each variant has a stable numeric code.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),
    #[error("array {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("array {0} missing from checkpoint")]
    MissingArray(String),
    #[error("array {0} is not expected by this model layout")]
    UnexpectedArray(String),
    #[error("array {name}: dtype code {found} does not match expected {expected}")]
    DType {
        name: String,
        expected: u8,
        found: u8,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("whitening to batch-norm conversion failed: {0}")]
    Conversion(String),
}

impl CheckpointError {
    pub fn code(&self) -> u32 {
        match self {
            CheckpointError::BadMagic(_) => 10,
            CheckpointError::UnsupportedVersion(_) => 11,
            CheckpointError::Truncated(_) => 12,
            CheckpointError::ShapeMismatch { .. } => 13,
            CheckpointError::MissingArray(_) => 14,
            CheckpointError::UnexpectedArray(_) => 15,
            CheckpointError::DType { .. } => 16,
            CheckpointError::Malformed(_) => 17,
            CheckpointError::Conversion(_) => 18,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest parse error: {0}")]
    Manifest(String),
    #[error("dataset format version {found} is not supported (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("sample index {index} out of range for {count} samples")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("data file {0} has the wrong size")]
    Size(String),
}
