use std::io;

use thiserror::Error;

/// Errors raised by the MVOL volume container reader.
#[derive(Debug, Error)]
pub enum MvolError {
    #[error("bad magic: expected MVOL0001, found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unknown payload kind {0}")]
    UnknownKind(u8),
    #[error("header truncated: {got} of {expected} bytes")]
    TruncatedHeader { expected: usize, got: usize },
    #[error("payload truncated: dims imply {expected} bytes, found {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("payload has {extra} trailing bytes beyond the declared dims")]
    TrailingBytes { extra: usize },
    #[error("non-positive or non-finite spacing {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("label value {value} at voxel {index} is not one of 0, 1, 2")]
    InvalidLabel { index: usize, value: u8 },
    #[error("expected a {expected} volume, file holds {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
}

/// Errors raised by the checkpoint container reader.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected MCKP0001, found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },
    #[error("missing buffer {0:?}")]
    MissingBuffer(String),
    #[error("buffer {name:?} is malformed: {detail}")]
    Malformed { name: String, detail: String },
    #[error("config hash mismatch: checkpoint has {found}, expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },
}

#[derive(Debug, Error)]
pub enum Error {
    /// A shape or argument precondition did not hold.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("backward already ran on this tape; clear it before the next pass")]
    BackwardTwice,
    #[error("non-finite loss in term {term} at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },
    #[error(transparent)]
    Mvol(#[from] MvolError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Contract {
        op,
        detail: detail.into(),
    }
}
