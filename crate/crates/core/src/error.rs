use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("requested {requested} items but only {available} are available")]
    NotEnoughPoints { requested: usize, available: usize },

    #[error("code {code} does not fit in 4 bits")]
    CodeOutOfRange { code: u8 },

    #[error("LUT has {lut} subspaces but the block has {block}")]
    SubspaceMismatch { lut: usize, block: usize },

    #[error("feature schema mismatch: model expects {expected} features, got {actual}")]
    SchemaMismatch { expected: usize, actual: usize },

    #[error("ground truth covers {available} queries, {requested} needed")]
    MissingGroundTruth { requested: usize, available: usize },

    #[error("index was built without {0}")]
    MissingComponent(&'static str),

    #[error("index file: bad magic")]
    BadMagic,

    #[error("index file: unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("index file: checksum mismatch")]
    Checksum,

    #[error("index file: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
