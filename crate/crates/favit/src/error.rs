use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's precondition.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A forward or backward pass produced NaN or Inf. The step is aborted;
    /// `op` names the producing operation.
    #[error("non-finite value produced by {op}{}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        context: Option<String>,
    },

    /// Invalid argument outside the shape system (zero-norm vector, bad
    /// direction, degenerate region, ...).
    #[error("invalid input to {op}: {detail}")]
    InvalidInput { op: &'static str, detail: String },

    /// Configuration file problems: unreadable, unparsable, or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor archive problems: bad magic, truncation, unknown names,
    /// shape mismatches against the model.
    #[error("archive error: {0}")]
    Archive(String),

    /// Dataset construction problems (fake without matching real, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A verification pass (gradcheck) exceeded its tolerance.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("training error: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
