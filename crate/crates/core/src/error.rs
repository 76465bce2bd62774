// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by emprobe.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Underlying I/O failure, annotated with the path when known.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The file does not start with the store magic.
    #[error("not a store file")]
    NotAStoreFile,

    /// Header names a record kind this build does not know.
    #[error("unknown record kind {0}")]
    UnknownKind(u8),

    /// Header version differs from the supported one.
    #[error("unsupported store version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    /// The payload ended before the header said it would.
    #[error("truncated payload: {0}")]
    Truncated(String),

    /// A record was read as one kind but holds another.
    #[error("expected a {expected} record, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },

    /// A record or argument breaks a type invariant.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Shapes of two inputs disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Regression design is rank deficient or too small.
    #[error("rank deficient design: {0}")]
    RankDeficient(String),

    /// A statistic is undefined for the given input.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Index (token id or dimension) out of range.
    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    /// Invalid model or training configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
