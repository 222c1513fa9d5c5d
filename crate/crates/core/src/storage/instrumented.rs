use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use bytes::Bytes;

use super::{ByteRange, Result, SharedProvider, StorageKey, StorageProvider};

/// Shared call counters.
#[derive(Debug, Default)]
pub struct IoStats {
    gets: AtomicU64,
    bytes_read: AtomicU64,
    puts: AtomicU64,
    bytes_written: AtomicU64,
    lists: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IoSnapshot {
    pub gets: u64,
    pub bytes_read: u64,
    pub puts: u64,
    pub bytes_written: u64,
    pub lists: u64,
}

impl IoStats {
    pub fn snapshot(&self) -> IoSnapshot {
        IoSnapshot {
            gets: self.gets.load(Ordering::Relaxed),
            bytes_read: self.bytes_read.load(Ordering::Relaxed),
            puts: self.puts.load(Ordering::Relaxed),
            bytes_written: self.bytes_written.load(Ordering::Relaxed),
            lists: self.lists.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.gets.store(0, Ordering::Relaxed);
        self.bytes_read.store(0, Ordering::Relaxed);
        self.puts.store(0, Ordering::Relaxed);
        self.bytes_written.store(0, Ordering::Relaxed);
        self.lists.store(0, Ordering::Relaxed);
    }
}

/// Wraps a provider and counts every call that reaches it.
#[derive(Debug, Clone)]
pub struct Instrumented {
    inner: SharedProvider,
    stats: Arc<IoStats>,
}

impl Instrumented {
    pub fn new(inner: SharedProvider) -> Self {
        Instrumented {
            inner,
            stats: Arc::default(),
        }
    }

    pub fn stats(&self) -> Arc<IoStats> {
        self.stats.clone()
    }
}

impl StorageProvider for Instrumented {
    fn get(&self, key: &StorageKey, range: Option<ByteRange>) -> Result<Bytes> {
        self.stats.gets.fetch_add(1, Ordering::Relaxed);
        let data = self.inner.get(key, range)?;
        self.stats
            .bytes_read
            .fetch_add(data.len() as u64, Ordering::Relaxed);
        Ok(data)
    }

    fn put(&self, key: &StorageKey, data: Bytes) -> Result<()> {
        self.stats.puts.fetch_add(1, Ordering::Relaxed);
        self.stats
            .bytes_written
            .fetch_add(data.len() as u64, Ordering::Relaxed);
        self.inner.put(key, data)
    }

    fn delete(&self, key: &StorageKey) -> Result<()> {
        self.inner.delete(key)
    }

    fn list(&self, prefix: &str) -> Result<Vec<StorageKey>> {
        self.stats.lists.fetch_add(1, Ordering::Relaxed);
        self.inner.list(prefix)
    }

    fn size(&self, key: &StorageKey) -> Result<u64> {
        self.inner.size(key)
    }
}
