use serde::{Deserialize, Serialize};

use super::{FormatError, Result};

/// Per-sample compression applied inside chunks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compression {
    #[default]
    None,
    /// LZ4 block format with a length prefix.
    Lz,
}

impl Compression {
    pub fn tag(self) -> u8 {
        match self {
            Compression::None => 0,
            Compression::Lz => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Compression::None),
            1 => Ok(Compression::Lz),
            t => Err(FormatError::CorruptHeader(format!("unknown compression tag {t}"))),
        }
    }

    pub fn compress(self, raw: &[u8]) -> Vec<u8> {
        match self {
            Compression::None => raw.to_vec(),
            Compression::Lz => lz4_flex::compress_prepend_size(raw),
        }
    }

    pub fn decompress(self, stored: &[u8]) -> Result<Vec<u8>> {
        match self {
            Compression::None => Ok(stored.to_vec()),
            Compression::Lz => lz4_flex::decompress_size_prepended(stored)
                .map_err(|e| FormatError::CorruptHeader(format!("lz payload: {e}"))),
        }
    }
}
