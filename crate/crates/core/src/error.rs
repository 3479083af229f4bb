use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("variable is not a gradient-tracking leaf of this tape")]
    NotOnTape,

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("csv file {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("non-numeric value `{value}` in column `{column}` (row {row})")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("label column `{0}` has a single class")]
    SingleClass(String),

    #[error("split `{split}` received {got} rows, needs at least {needed}")]
    SplitTooSmall {
        split: &'static str,
        got: usize,
        needed: usize,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("sgld produced a non-finite iterate at step {step}")]
    NonFiniteIterate { step: usize },

    #[error("non-finite counterfactual loss at step {step}: {components}")]
    NonFiniteLoss { step: usize, components: String },

    #[error("empty calibration set")]
    EmptyCalibration,

    #[error("empty reference set for {0}")]
    EmptyReference(&'static str),

    #[error("{0} is required but was not provided")]
    Missing(&'static str),

    #[error("counterfactual precondition violated: model already predicts target {0}")]
    AlreadyTarget(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
