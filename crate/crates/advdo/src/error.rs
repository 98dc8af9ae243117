//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the workbench.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a precondition (shape mismatch, non-finite
    /// value, empty input, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An optimization produced a non-finite loss; carries the loss trace
    /// up to the failure.
    #[error("optimization diverged after {} steps (last finite loss {last_finite:?})", trace.len())]
    OptimizationDiverged {
        /// Loss values recorded before the failure.
        trace: Vec<f64>,
        /// Last finite loss seen, if any.
        last_finite: Option<f64>,
    },

    /// Model training failed.
    #[error("training failed: {reason}")]
    Training {
        /// Human-readable cause.
        reason: String,
        /// Per-epoch losses recorded before the failure.
        trace: Vec<f64>,
    },

    /// A prediction model cannot satisfy the requested capability.
    #[error("model capability error: {0}")]
    Capability(String),

    /// The external predictor bridge misbehaved (malformed reply, timeout,
    /// dead process).
    #[error("bridge error: {0}")]
    Bridge(String),

    /// A planner could not produce a plan.
    #[error("planner error: {0}")]
    Planner(String),

    /// Transfer rate is undefined because the source attack had no effect.
    #[error("transfer rate undefined: source success degree is zero")]
    UndefinedTransfer,

    /// Scenario/map/config parsing failed; names the offending field.
    #[error("parse error in {file}: {detail}")]
    Parse {
        /// File being parsed.
        file: String,
        /// What was wrong, including the field or line where known.
        detail: String,
    },

    /// Configuration rejected before any work started.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for [`Error::InvalidInput`].
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
