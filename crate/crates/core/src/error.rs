use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor/operation shape contract was violated; the message names the
    /// operation and the offending dimension.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward or backward pass produced a NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// backward() called on a tensor that is not a single scalar.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// backward() called twice on the same recorded forward pass.
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,

    /// Parameter lookup failed.
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    /// A parameter already exists under this name.
    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),

    /// Optimizer step requested for a parameter with no gradient.
    #[error("parameter '{0}' has no gradient; run backward and collect grads first")]
    MissingGrad(String),

    /// Checkpoint container is malformed, truncated, or version-mismatched.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Manifest file is malformed; the message carries the line number.
    #[error("manifest error at line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    /// Data preparation failure (alignment, augmentation, synthesis).
    #[error("data error: {0}")]
    Data(String),

    /// Loss-term input rejected (bad target, missing pair, bad weights).
    #[error("loss error: {0}")]
    Loss(String),

    /// Training-time failure (NaN loss, empty checkpoint set, bad schedule).
    #[error("train error: {0}")]
    Train(String),

    /// Configuration rejected.
    #[error("config error: {0}")]
    Config(String),

    /// Evaluation failure.
    #[error("eval error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
