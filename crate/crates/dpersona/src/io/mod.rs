//! On-disk formats: the DPAK named-array container, dataset split archives,
//! and model checkpoints. All parsers validate untrusted input before
//! allocating and round-trip bit-exactly.

pub mod checkpoint;
pub mod dataset;
pub mod dpak;

use thiserror::Error;

/// Errors shared by the file-format readers.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("not a recognized archive (bad magic)")]
    BadMagic,
    #[error("file is truncated")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("entry {name}: {reason}")]
    BadEntry { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
