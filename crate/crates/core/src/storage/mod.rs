//! Key/value object storage with optional byte-range reads.
//!
//! Every backend implements [`StorageProvider`]. Providers compose: the
//! [`CacheChain`] puts a bounded LRU provider in front of a slower one,
//! [`SimulatedRemote`] adds request latency to any backend, and
//! [`Instrumented`] counts calls so tests and benchmarks can assert on I/O.

mod cache;
mod fs;
mod instrumented;
mod memory;
mod registry;
mod remote;

use std::fmt;
use std::sync::Arc;

use bytes::Bytes;

pub use cache::{default_cache_capacity, CacheChain, CACHE_BYTES_ENV};
pub use fs::FileSystemProvider;
pub use instrumented::{Instrumented, IoStats, IoSnapshot};
pub use memory::MemoryProvider;
pub use registry::ProviderRegistry;
pub use remote::{LatencyModel, ReadOnly, SimulatedRemote};

pub type Result<T, E = StorageError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("range end {end} is past the end of `{key}` ({len} bytes)")]
    RangeOutOfBounds { key: String, end: u64, len: u64 },
    #[error("i/o failure on `{key}`: {source}")]
    Io {
        key: String,
        #[source]
        source: std::io::Error,
    },
    #[error("provider is read-only, cannot modify `{0}`")]
    ReadOnlyProvider(String),
    #[error("invalid storage key `{0}`")]
    InvalidKey(String),
    #[error("invalid byte range [{start}, {end})")]
    InvalidRange { start: u64, end: u64 },
}

impl StorageError {
    pub fn is_not_found(&self) -> bool {
        matches!(self, StorageError::NotFound(_))
    }

    pub(crate) fn io(key: impl Into<String>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            StorageError::NotFound(key.into())
        } else {
            StorageError::Io {
                key: key.into(),
                source,
            }
        }
    }
}

/// Slash-separated relative object key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StorageKey(String);

impl StorageKey {
    pub fn new(key: impl Into<String>) -> Result<Self> {
        let key = key.into();
        let valid = !key.is_empty()
            && !key.starts_with('/')
            && key.split('/').all(|seg| !seg.is_empty() && seg != ".." && seg != ".");
        if valid {
            Ok(StorageKey(key))
        } else {
            Err(StorageError::InvalidKey(key))
        }
    }

    /// Appends one or more `/`-separated segments.
    pub fn join(&self, rest: &str) -> Result<Self> {
        StorageKey::new(format!("{}/{}", self.0, rest))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StorageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<&str> for StorageKey {
    type Error = StorageError;

    fn try_from(s: &str) -> Result<Self> {
        StorageKey::new(s)
    }
}

/// Half-open byte interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ByteRange {
    pub start: u64,
    pub end: u64,
}

impl ByteRange {
    pub fn new(start: u64, end: u64) -> Result<Self> {
        if start < end {
            Ok(ByteRange { start, end })
        } else {
            Err(StorageError::InvalidRange { start, end })
        }
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Uniform key -> bytes storage.
///
/// Implementations must be safe for concurrent use. Concurrent writes to a
/// single key resolve to one of the written values; readers never observe a
/// partially written object.
pub trait StorageProvider: Send + Sync + fmt::Debug {
    /// Whole object, or exactly `range` of it.
    fn get(&self, key: &StorageKey, range: Option<ByteRange>) -> Result<Bytes>;

    fn put(&self, key: &StorageKey, data: Bytes) -> Result<()>;

    /// Removes `key`. Deleting a missing key succeeds.
    fn delete(&self, key: &StorageKey) -> Result<()>;

    /// All keys starting with `prefix`, sorted lexicographically.
    fn list(&self, prefix: &str) -> Result<Vec<StorageKey>>;

    /// Object length in bytes.
    fn size(&self, key: &StorageKey) -> Result<u64> {
        Ok(self.get(key, None)?.len() as u64)
    }

    fn exists(&self, key: &StorageKey) -> Result<bool> {
        match self.size(key) {
            Ok(_) => Ok(true),
            Err(e) if e.is_not_found() => Ok(false),
            Err(e) => Err(e),
        }
    }
}

pub type SharedProvider = Arc<dyn StorageProvider>;

/// Slices a whole object according to an optional range.
pub(crate) fn slice_object(key: &StorageKey, data: Bytes, range: Option<ByteRange>) -> Result<Bytes> {
    match range {
        None => Ok(data),
        Some(r) => {
            if r.end > data.len() as u64 {
                return Err(StorageError::RangeOutOfBounds {
                    key: key.to_string(),
                    end: r.end,
                    len: data.len() as u64,
                });
            }
            Ok(data.slice(r.start as usize..r.end as usize))
        }
    }
}
