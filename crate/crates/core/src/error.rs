use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("missing data at cell ({col}, {row})")]
    MissingData { col: usize, row: usize },

    #[error("grid too small: {width}x{height} (need at least {min}x{min})")]
    TooSmall {
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("zero elevation range (constant tile)")]
    ZeroRange,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coordinate ({x}, {y}) outside the queryable domain")]
    OutOfDomain { x: f64, y: f64 },

    #[error("frequency band {band} has {available} candidates, {requested} requested")]
    PoolExhausted {
        band: usize,
        available: usize,
        requested: usize,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unknown profile: {0}")]
    UnknownProfile(String),

    #[error("container: {0}")]
    Container(String),

    #[error("container checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
}

impl Error {
    /// True for errors caused by numerical failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
