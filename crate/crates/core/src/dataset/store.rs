//! Key layout of a dataset on its provider, plus shared read caches.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use bytes::Bytes;
use indexmap::IndexMap;
use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::format::ChunkView;
use crate::storage::{ProviderRegistry, SharedProvider, StorageKey};
use crate::version::VersionTree;

pub(crate) const DATASET_META: &str = "dataset_meta.json";
pub(crate) const VC_INFO: &str = "version_control_info.json";
pub(crate) const LINEAGE: &str = "lineage.json";

const CHUNK_CACHE_BYTES: u64 = 64 << 20;

pub(crate) fn node_key(node: &str, rel: &str) -> StorageKey {
    StorageKey::new(format!("versions/{node}/{rel}")).expect("valid node key")
}

pub(crate) fn tensor_key(node: &str, tensor: &str, file: &str) -> StorageKey {
    StorageKey::new(format!("versions/{node}/{tensor}/{file}")).expect("valid tensor key")
}

pub(crate) fn chunk_key(node: &str, tensor: &str, name: &str) -> StorageKey {
    StorageKey::new(format!("versions/{node}/{tensor}/chunks/{name}")).expect("valid chunk key")
}

pub(crate) fn lock_key(branch: &str) -> StorageKey {
    StorageKey::new(format!("branches/{branch}.lock")).expect("valid lock key")
}

pub(crate) fn key(name: &str) -> StorageKey {
    StorageKey::new(name).expect("valid key")
}

#[derive(Debug, Default)]
struct ChunkLru {
    order: IndexMap<String, Arc<ChunkView>>,
    bytes: u64,
}

/// Provider handle shared by a dataset and every snapshot taken from it.
#[derive(Debug)]
pub(crate) struct Store {
    pub provider: SharedProvider,
    pub label: String,
    pub links: RwLock<ProviderRegistry>,
    chunks: Mutex<ChunkLru>,
    chunk_sets: RwLock<HashMap<(String, String), Arc<BTreeSet<String>>>>,
}

impl Store {
    pub fn new(provider: SharedProvider, label: String) -> Self {
        Store {
            provider,
            label,
            links: RwLock::new(ProviderRegistry::default()),
            chunks: Mutex::default(),
            chunk_sets: RwLock::default(),
        }
    }

    pub fn get(&self, key: &StorageKey) -> Result<Bytes> {
        Ok(self.provider.get(key, None)?)
    }

    pub fn put(&self, key: &StorageKey, data: impl Into<Bytes>) -> Result<()> {
        self.forget_chunk(key);
        Ok(self.provider.put(key, data.into())?)
    }

    pub fn get_json<T: DeserializeOwned>(&self, key: &StorageKey) -> Result<T> {
        let bytes = self.get(key)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::metadata(key.as_str(), e))
    }

    pub fn put_json<T: Serialize>(&self, key: &StorageKey, value: &T) -> Result<()> {
        let text = serde_json::to_vec_pretty(value).expect("metadata serializes");
        self.put(key, text)
    }

    pub fn load_tree(&self) -> Result<VersionTree> {
        self.get_json(&key(VC_INFO))
    }

    /// Re-reads the tree, applies `f` and writes it back.
    pub fn update_tree<R>(&self, f: impl FnOnce(&mut VersionTree) -> Result<R>) -> Result<(R, VersionTree)> {
        let mut tree = self.load_tree()?;
        let out = f(&mut tree)?;
        self.put_json(&key(VC_INFO), &tree)?;
        Ok((out, tree))
    }

    /// Fetches and parses a whole chunk, consulting the in-process cache first.
    pub fn chunk(&self, key: &StorageKey) -> Result<Arc<ChunkView>> {
        Ok(self.chunk_traced(key)?.0)
    }

    /// Like [`Store::chunk`], also reporting whether the provider was called.
    pub fn chunk_traced(&self, key: &StorageKey) -> Result<(Arc<ChunkView>, bool)> {
        if let Some(view) = self.cached_chunk(key) {
            return Ok((view, false));
        }
        let view = Arc::new(ChunkView::new(self.get(key)?)?);
        let size = view.bytes().len() as u64;
        if size <= CHUNK_CACHE_BYTES / 4 {
            let mut lru = self.chunks.lock();
            if lru.order.insert(key.as_str().to_string(), view.clone()).is_none() {
                lru.bytes += size;
            }
            while lru.bytes > CHUNK_CACHE_BYTES {
                match lru.order.shift_remove_index(0) {
                    Some((_, v)) => lru.bytes -= v.bytes().len() as u64,
                    None => break,
                }
            }
        }
        Ok((view, true))
    }

    fn cached_chunk(&self, key: &StorageKey) -> Option<Arc<ChunkView>> {
        let mut lru = self.chunks.lock();
        let idx = lru.order.get_index_of(key.as_str())?;
        let last = lru.order.len() - 1;
        lru.order.move_index(idx, last);
        lru.order.get_index(last).map(|(_, v)| v.clone())
    }

    fn forget_chunk(&self, key: &StorageKey) {
        let mut lru = self.chunks.lock();
        if let Some(v) = lru.order.shift_remove(key.as_str()) {
            lru.bytes -= v.bytes().len() as u64;
        }
    }

    /// Chunk set of a committed node. Committed sets never change, so they are cached.
    pub fn committed_chunk_set(&self, node: &str, tensor: &str) -> Result<Arc<BTreeSet<String>>> {
        let k = (node.to_string(), tensor.to_string());
        if let Some(set) = self.chunk_sets.read().get(&k) {
            return Ok(set.clone());
        }
        let set = match self.get_json::<BTreeSet<String>>(&tensor_key(node, tensor, "chunk_set.json")) {
            Ok(s) => s,
            // The tensor did not exist yet at this node.
            Err(Error::Storage(e)) if e.is_not_found() => BTreeSet::new(),
            Err(e) => return Err(e),
        };
        let set = Arc::new(set);
        self.chunk_sets.write().insert(k, set.clone());
        Ok(set)
    }
}
