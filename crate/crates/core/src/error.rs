use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The relative rotation sits at (or numerically near) angle π, where the
    /// logarithm has no unique preimage.
    #[error("cut locus: rotation angle {angle} is within {margin:e} of pi")]
    CutLocus { angle: f64, margin: f64 },

    #[error("numeric failure in layer {layer}: {detail}")]
    NumericFailure { layer: usize, detail: String },

    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize },

    #[error("integration failure at t = {t}: {reason}")]
    Integration {
        t: f64,
        reason: String,
        /// Poses accepted before the failure.
        partial: Box<crate::integrator::FlowPath>,
    },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
