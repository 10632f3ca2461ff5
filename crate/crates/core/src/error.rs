use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Shapes or lengths handed to an operation do not agree.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error("invalid file format: {0}")]
    Format(String),

    /// The target region's similarity distance is too close to zero to divide by.
    #[error("degenerate target: |sd_k| = {0:e} is below the guard")]
    DegenerateTarget(f64),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("MAPE undefined: all {0} labels are near zero")]
    MapeUndefined(usize),

    #[error("gradient check failed: max relative error {0:e}")]
    GradCheckFailed(f64),

    #[error("empty test set")]
    EmptyTestSet,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Numeric failures (as opposed to bad inputs) map to a separate CLI exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::DegenerateTarget(_)
                | Error::Divergence { .. }
                | Error::MapeUndefined(_)
                | Error::GradCheckFailed(_)
        )
    }
}
