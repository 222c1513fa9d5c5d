//! On-storage format: sample chunks, run-length index encoders and the
//! per-tensor type contract (htype).

mod chunk;
mod compression;
mod encoder;
mod htype;

pub use chunk::{
    decode_sample, encode_chunk, ChunkBuilder, ChunkHeader, ChunkView, HeaderRead, ShapeRow,
    CHUNK_FORMAT_VERSION, CHUNK_MAGIC,
};
pub(crate) use chunk::decode_stored;
pub use compression::Compression;
pub use encoder::{ChunkEncoder, ChunkId, EncoderRow, ShapeEncoder, ENCODER_MAGIC, SHAPE_MAGIC};
pub use htype::{validate_sample, BboxFormat, HtypeSchema, Htype, MetaType};

use serde::{Deserialize, Serialize};

use crate::scalar::Dtype;

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: Dtype, found: Dtype },
    #[error("rank mismatch: expected {expected} dimensions, found {found}")]
    RankMismatch { expected: usize, found: usize },
    #[error("htype constraint violated: {0}")]
    HtypeConstraint(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("chunk payload of {size} bytes exceeds the {max} byte bound")]
    ChunkOverflow { size: u64, max: u64 },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: u64, len: u64 },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("encoder invariant violated: {0}")]
    InvariantViolation(String),
}

pub const DEFAULT_MIN_CHUNK_BYTES: u64 = 8 << 20;
pub const DEFAULT_MAX_CHUNK_BYTES: u64 = 16 << 20;

/// Lower and upper bound on chunk payload size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPolicy {
    pub min_bytes: u64,
    pub max_bytes: u64,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        ChunkPolicy {
            min_bytes: DEFAULT_MIN_CHUNK_BYTES,
            max_bytes: DEFAULT_MAX_CHUNK_BYTES,
        }
    }
}

impl ChunkPolicy {
    pub fn new(min_bytes: u64, max_bytes: u64) -> Result<Self> {
        let policy = ChunkPolicy {
            min_bytes,
            max_bytes,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_bytes == 0 || self.min_bytes > self.max_bytes {
            return Err(FormatError::InvalidSchema(format!(
                "chunk bounds must satisfy 0 < min <= max, got {}..{}",
                self.min_bytes, self.max_bytes
            )));
        }
        Ok(())
    }
}
