use std::collections::BTreeMap;

use bytes::Bytes;
use parking_lot::RwLock;

use super::{slice_object, ByteRange, Result, StorageError, StorageKey, StorageProvider};

/// Process-local provider backed by a sorted map.
#[derive(Debug, Default)]
pub struct MemoryProvider {
    objects: RwLock<BTreeMap<String, Bytes>>,
}

impl MemoryProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total bytes stored under keys starting with `prefix`.
    pub fn total_bytes(&self, prefix: &str) -> u64 {
        self.objects
            .read()
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len() as u64)
            .sum()
    }
}

impl StorageProvider for MemoryProvider {
    fn get(&self, key: &StorageKey, range: Option<ByteRange>) -> Result<Bytes> {
        let data = self
            .objects
            .read()
            .get(key.as_str())
            .cloned()
            .ok_or_else(|| StorageError::NotFound(key.to_string()))?;
        slice_object(key, data, range)
    }

    fn put(&self, key: &StorageKey, data: Bytes) -> Result<()> {
        self.objects.write().insert(key.to_string(), data);
        Ok(())
    }

    fn delete(&self, key: &StorageKey) -> Result<()> {
        self.objects.write().remove(key.as_str());
        Ok(())
    }

    fn list(&self, prefix: &str) -> Result<Vec<StorageKey>> {
        Ok(self
            .objects
            .read()
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| StorageKey(k.clone()))
            .collect())
    }

    fn size(&self, key: &StorageKey) -> Result<u64> {
        self.objects
            .read()
            .get(key.as_str())
            .map(|b| b.len() as u64)
            .ok_or_else(|| StorageError::NotFound(key.to_string()))
    }
}
