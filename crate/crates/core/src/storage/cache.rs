use bytes::Bytes;
use indexmap::IndexMap;
use parking_lot::Mutex;

use super::{ByteRange, Result, SharedProvider, StorageKey, StorageProvider};

/// Environment variable holding the default cache capacity in bytes.
pub const CACHE_BYTES_ENV: &str = "TENSORLAKE_CACHE_BYTES";

const DEFAULT_CACHE_BYTES: u64 = 256 << 20;

/// Capacity from `TENSORLAKE_CACHE_BYTES`, or 256 MiB.
pub fn default_cache_capacity() -> u64 {
    std::env::var(CACHE_BYTES_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&v| v > 0)
        .unwrap_or(DEFAULT_CACHE_BYTES)
}

#[derive(Debug, Default)]
struct LruState {
    // Least recently used first.
    order: IndexMap<String, u64>,
    current: u64,
}

impl LruState {
    fn touch(&mut self, key: &str) -> bool {
        match self.order.shift_remove(key) {
            Some(size) => {
                self.order.insert(key.to_string(), size);
                true
            }
            None => false,
        }
    }

    fn forget(&mut self, key: &str) -> bool {
        match self.order.shift_remove(key) {
            Some(size) => {
                self.current -= size;
                true
            }
            None => false,
        }
    }
}

/// Two-level provider: `outer` caches whole objects read from `inner`.
///
/// Eviction is least-recently-used over whole objects and keeps the summed
/// size of cached objects at or below `capacity`. Ranged reads of cached
/// objects are served from the cache; ranged reads of uncached objects go
/// straight to `inner` and are not admitted. Writes go through to `inner`
/// and invalidate the cached copy.
#[derive(Debug)]
pub struct CacheChain {
    outer: SharedProvider,
    inner: SharedProvider,
    capacity: u64,
    state: Mutex<LruState>,
}

impl CacheChain {
    /// Panics if `capacity` is zero.
    pub fn new(outer: SharedProvider, inner: SharedProvider, capacity: u64) -> Self {
        assert!(capacity > 0, "cache capacity must be positive");
        CacheChain {
            outer,
            inner,
            capacity,
            state: Mutex::default(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn cached_bytes(&self) -> u64 {
        self.state.lock().current
    }

    /// Cached keys, least recently used first.
    pub fn cached_keys(&self) -> Vec<String> {
        self.state.lock().order.keys().cloned().collect()
    }

    fn admit(&self, key: &StorageKey, data: &Bytes) -> Result<()> {
        let size = data.len() as u64;
        if size > self.capacity {
            return Ok(());
        }
        let mut state = self.state.lock();
        if state.touch(key.as_str()) {
            // A concurrent miss already admitted it.
            return Ok(());
        }
        while state.current + size > self.capacity {
            let Some((victim, vsize)) = state.order.shift_remove_index(0) else {
                break;
            };
            state.current -= vsize;
            self.outer.delete(&StorageKey(victim))?;
        }
        self.outer.put(key, data.clone())?;
        state.order.insert(key.to_string(), size);
        state.current += size;
        Ok(())
    }
}

impl StorageProvider for CacheChain {
    fn get(&self, key: &StorageKey, range: Option<ByteRange>) -> Result<Bytes> {
        if self.state.lock().touch(key.as_str()) {
            match self.outer.get(key, range) {
                Ok(data) => return Ok(data),
                // Evicted between the lookup and the read.
                Err(e) if e.is_not_found() => {}
                Err(e) => return Err(e),
            }
        }
        if range.is_some() {
            return self.inner.get(key, range);
        }
        let data = self.inner.get(key, None)?;
        self.admit(key, &data)?;
        Ok(data)
    }

    fn put(&self, key: &StorageKey, data: Bytes) -> Result<()> {
        self.inner.put(key, data)?;
        let mut state = self.state.lock();
        if state.forget(key.as_str()) {
            self.outer.delete(key)?;
        }
        Ok(())
    }

    fn delete(&self, key: &StorageKey) -> Result<()> {
        self.inner.delete(key)?;
        let mut state = self.state.lock();
        if state.forget(key.as_str()) {
            self.outer.delete(key)?;
        }
        Ok(())
    }

    fn list(&self, prefix: &str) -> Result<Vec<StorageKey>> {
        self.inner.list(prefix)
    }

    fn size(&self, key: &StorageKey) -> Result<u64> {
        if let Some(&size) = self.state.lock().order.get(key.as_str()) {
            return Ok(size);
        }
        self.inner.size(key)
    }
}
