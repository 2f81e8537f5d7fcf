use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is zero (or below 1e-12)")]
    ZeroVector,
    #[error("embedding must have at least one coordinate")]
    EmptyEmbedding,
    #[error("embedding contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("block size {block} does not divide dimension {dim}")]
    IndivisibleBlockSize { dim: usize, block: usize },
    #[error("dimension and block size must be positive")]
    ZeroBlockSize,
    #[error("invalid displacement P={p} for N={n} blocks (P must be 0 or in 2..=N)")]
    InvalidDisplacement { p: usize, n: usize },
    #[error("mapping is not a bijection over {0} blocks")]
    NotABijection(usize),
    #[error("permutations were built for different partitions")]
    PartitionMismatch,
    #[error("{0} score list is empty")]
    EmptyScoreList(&'static str),
    #[error("rate {0} outside the accepted range")]
    InvalidRate(f64),
    #[error("unknown record id `{0}`")]
    UnknownRecord(String),
    #[error("pair ({a}, {b}) contradicts identity labels (declared mated={mated})")]
    LabelContradiction { a: String, b: String, mated: bool },
    #[error("no original embedding for record `{0}`")]
    MissingOriginal(String),
    #[error("reconstruction channel has no entry for record `{0}`")]
    ChannelGap(String),
    #[error("invalid gaussian sigma {0}")]
    InvalidSigma(f64),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("too few examples: {0}")]
    TooFewExamples(String),
    #[error("record `{0}` has no binary attribute label")]
    MissingAttribute(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("malformed file at byte {offset}: {reason}")]
    MalformedFile { offset: u64, reason: String },
    #[error("duplicate record id `{0}`")]
    DuplicateRecordId(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 invalid configuration or input, 3 insufficient data, 4 I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::EmptyScoreList(_) | Error::TooFewExamples(_) => 3,
            Error::Io(_) => 4,
            _ => 2,
        }
    }
}
