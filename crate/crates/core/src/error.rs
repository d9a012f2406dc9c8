use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroVector { norm: f64 },

    #[error("normalization context does not match the input vector")]
    ContextMismatch,

    #[error("layer norm needs at least 2 features, got {0}")]
    DimensionTooSmall(usize),

    #[error("layer norm input has zero variance and epsilon is 0")]
    DegenerateVariance,

    #[error("vector is not unit-norm (norm = {norm})")]
    NotNormalized { norm: f64 },

    #[error("loss needs at least 2 classes, got {0}")]
    SingleClass(usize),

    #[error("class {class} out of range for {class_count} classes")]
    InvalidClass { class: usize, class_count: usize },

    #[error("margin {0} outside [0, 1)")]
    InvalidMargin(f64),

    #[error("target class {0} is not in the active class set")]
    TargetNotActive(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("batch spec needs {classes_per_batch} classes but the dataset has {class_count}")]
    SpecInfeasible {
        classes_per_batch: usize,
        class_count: usize,
    },

    #[error("k = {k} too large for {available} candidates")]
    KTooLarge { k: usize, available: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input) during training.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
