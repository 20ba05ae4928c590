// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

/// Errors raised by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors or vectors disagree on a dimension.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An operation received an empty collection it cannot work with.
    #[error("empty input: {0}")]
    Empty(String),

    /// Two vectors expected to differ are (numerically) equal.
    #[error("degenerate pair: {0}")]
    DegeneratePair(String),

    /// A store directory is missing pieces, has a bad checksum, or wrong sizes.
    #[error("corrupt store at {path}: {reason}")]
    CorruptStore {
        /// Offending path.
        path: PathBuf,
        /// What was wrong.
        reason: String,
    },

    /// A stored record does not reconstruct its own embedding.
    #[error(
        "reconstruction invariant violated for {sample_id}: relative error {relative_error:.3e}"
    )]
    Reconstruction {
        /// Record identifier.
        sample_id: String,
        /// ‖Σ contributions + residual − embedding‖ / ‖embedding‖.
        relative_error: f64,
    },

    /// NaN or infinity produced during a forward pass.
    #[error("non-finite value at layer {layer}, head {head}: {stage}")]
    NonFinite {
        /// Layer index.
        layer: usize,
        /// Head index, or `usize::MAX` for non-head stages.
        head: usize,
        /// Name of the computation stage.
        stage: &'static str,
    },

    /// A numeric quantity could not be formed (zero norm, undefined threshold).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Filesystem failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// Path being accessed.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    /// Structured-text (JSON) failure.
    #[error("failed to parse {path}: {source}")]
    Json {
        /// Path being parsed.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: serde_json::Error,
    },

    /// Delimited-text failure.
    #[error("failed to parse {path}: {reason}")]
    Delimited {
        /// Path being parsed.
        path: PathBuf,
        /// What was wrong.
        reason: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::CorruptStore {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Coarse classification used by the command line to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Self::Io { .. }
            | Self::CorruptStore { .. }
            | Self::Json { .. }
            | Self::Delimited { .. } => ErrorKind::Io,
            Self::NonFinite { .. } | Self::Numeric(_) | Self::Reconstruction { .. } => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Validation,
        }
    }
}

/// Error families, one per command-line exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or inputs that violate a precondition.
    Validation,
    /// Filesystem or format problems.
    Io,
    /// Numerical failures.
    Numeric,
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
