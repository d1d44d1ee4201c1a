use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("k = {k} exceeds the {available} selectable tokens")]
    KTooLarge { k: usize, available: usize },

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("code value {code} out of range for {bits}-bit codebook")]
    CodeOutOfRange { code: usize, bits: u32 },

    #[error("token {0} is not a middle-segment token")]
    UnknownToken(usize),

    #[error("segment overflow: {0}")]
    SegmentOverflow(String),

    #[error("local segment is empty")]
    LocalEmpty,

    #[error("invalid cost model: {0}")]
    InvalidModel(String),

    #[error("degenerate regression design: {0}")]
    DegenerateDesign(String),

    #[error("invalid ratio {0}: must lie in [0, 1]")]
    InvalidRatio(f64),

    #[error("invalid workload: {0}")]
    InvalidSpec(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
