use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor shape {shape:?} needs {expected} elements, got {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient produced by `{op}` during backward")]
    NonFiniteGradient { op: &'static str },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient for parameter `{name}` is non-finite")]
    NonFiniteParamGradient { name: String },

    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),

    #[error("layer {layer}: expected input width {expected}, got {actual}")]
    LayerInput {
        layer: usize,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {0} lies outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("step size underflow at t = {t}: stiff or invalid field")]
    StepUnderflow { t: f64 },

    #[error("solver exceeded {0} steps")]
    TooManySteps(usize),

    #[error("solver state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("backpropagation through an adaptive solver is not supported")]
    AdaptiveNotDifferentiable,

    #[error("training diverged at step {step}: flow loss {flow_loss}, label autoencoding loss {ae_loss}")]
    Diverged {
        step: usize,
        flow_loss: f64,
        ae_loss: f64,
    },

    #[error("unknown solver `{0}` (expected euler:N, rk4:N, dopri5 or dopri5:RTOL,ATOL)")]
    UnknownSolver(String),

    #[error("unknown schedule `{0}` (expected linear, concave or convex)")]
    UnknownSchedule(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("rows {first} and {second} share the same input but have different labels")]
    ConflictingDuplicate { first: usize, second: usize },

    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
