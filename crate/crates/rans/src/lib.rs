//! Entropy coding back end: quantized CDF tables, a reference rANS coder with
//! bypass escapes, and the `JLLC` container.

pub mod cdf;
pub mod coder;
pub mod container;
pub mod native;

pub use cdf::{quantize_pmf, CdfTableSet, FlatTables, PRECISION};
pub use coder::{decode, encode, ideal_bits, RansDecoder, RANS_L};
pub use container::{Container, HEADER_LEN};

#[derive(Debug, thiserror::Error)]
pub enum CoderError {
    #[error("invalid cdf table: {0}")]
    InvalidTable(String),
    #[error("table id {id} out of range ({count} tables)")]
    TableId { id: u32, count: usize },
    #[error("{symbols} symbols but {ids} table ids")]
    LengthMismatch { symbols: usize, ids: usize },
    #[error("stream truncated")]
    Truncated,
    #[error("corrupt stream: {0}")]
    Corrupt(&'static str),
    #[error("container format: {0}")]
    Format(String),
    #[error("native coder: {0}")]
    Native(String),
}

pub type Result<T> = std::result::Result<T, CoderError>;
