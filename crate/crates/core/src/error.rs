use thiserror::Error;

use crate::evt::EvtFit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar output, selected output has {len} elements")]
    NonScalarOutput { len: usize },

    #[error("backward called before forward")]
    NoForwardPass,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("invalid model (layer {layer:?}): {message}")]
    InvalidModel {
        layer: Option<usize>,
        message: String,
    },

    #[error("invalid dataset (record {record}): {message}")]
    InvalidDataset { record: usize, message: String },

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("input is not classified above the target (margin {margin})")]
    Misclassified { margin: f64 },

    #[error("second-order score requires a twice-differentiable model ({0})")]
    NotTwiceDifferentiable(String),

    #[error("non-finite sample value in batch {batch}, sample {sample}: {value}")]
    NonFiniteSample {
        batch: usize,
        sample: usize,
        value: f64,
    },

    #[error("reverse Weibull fit did not converge (best log-likelihood {})", best.log_likelihood)]
    FitNotConverged { best: Box<EvtFit> },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
