//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by spectral-adapter operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An input contained NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A documented precondition does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// An iterative solver did not converge.
    #[error("{algorithm} did not converge for a {rows}x{cols} matrix after {iterations} iterations")]
    NoConvergence {
        algorithm: &'static str,
        rows: usize,
        cols: usize,
        iterations: usize,
    },

    /// A linear system is singular to working precision.
    #[error("singular system in {context}")]
    Singular { context: String },

    /// The base weight does not have full row rank.
    #[error(
        "base weight has rank {rank} < {required}; rank capacity guarantees assume an arbitrary full row-rank matrix"
    )]
    RankDeficient { rank: usize, required: usize },

    /// Training produced a non-finite or exploding loss.
    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// Malformed file or configuration.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::Singular { .. }
                | Error::Training { .. }
                | Error::NonFinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
