use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate channel: tr(W_hat H) = {0:e}")]
    DegenerateChannel(f64),

    #[error("non-finite {quantity} at layer {layer}")]
    NonFinite { layer: usize, quantity: &'static str },

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("linear solve failed after jitter retry")]
    Singular,

    #[error("ML enumeration of {0} candidates exceeds the 2^20 guard")]
    EnumerationTooLarge(u128),

    #[error("non-finite loss at finite-difference probe of parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("training diverged at epoch {epoch}: validation loss {val_loss:e} > 10x initial for 3 epochs")]
    Diverged { epoch: usize, val_loss: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("parameter context mismatch: {0}")]
    ParamsMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateChannel(_)
            | Error::NonFinite { .. }
            | Error::NotPsd(_)
            | Error::Singular
            | Error::NonFiniteGradient { .. }
            | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
