use thiserror::Error;

/// Errors produced by the tensor core, transforms, networks, and training loop.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor shapes are incompatible for the requested operation. The
    /// message names the operation and the offending axes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A precondition on an argument failed (bad level count, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity was detected where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file had the wrong magic, version, or structure.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Dataset-level problem: missing file, bad manifest row, starved
    /// attribute cell, empty group.
    #[error("dataset error: {0}")]
    Data(String),

    /// Configuration problem: unknown key, missing required key, unparsable value.
    #[error("config error: {0}")]
    Config(String),

    /// Training aborted; the message carries the iteration and the last
    /// good checkpoint path, if any.
    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
