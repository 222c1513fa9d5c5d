use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::Arc;

use serde::Serialize;

use super::link::LinkedSample;
use super::read::TensorReader;
use super::state::{NodeState, TensorVersion, TileEntry};
use super::store::Store;
use crate::array::DynArray;
use crate::error::Result;
use crate::format::{ChunkId, ChunkPolicy, HtypeSchema};
use crate::storage::{SharedProvider, StorageKey};
use crate::version::{CommitNode, VersionTree};

pub(crate) fn groups_of(node: &NodeState) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for name in node.tensors.keys() {
        let mut prefix = String::new();
        let segs: Vec<&str> = name.split('/').collect();
        for seg in &segs[..segs.len() - 1] {
            if !prefix.is_empty() {
                prefix.push('/');
            }
            prefix.push_str(seg);
            out.insert(prefix.clone());
        }
    }
    out
}

pub(crate) fn rows_of(node: &NodeState) -> u64 {
    node.tensors.values().map(TensorVersion::len).min().unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkRole {
    /// Followed by another chunk of the same contiguous run.
    Body,
    /// Last chunk of a contiguous run of untiled samples.
    Tail,
    /// One tile of a tiled sample.
    Tile,
}

/// One chunk object referenced by a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChunkInfo {
    pub name: String,
    pub key: String,
    pub payload_bytes: u64,
    pub samples: u32,
    pub role: ChunkRole,
}

/// Immutable read handle pinned to one version node.
#[derive(Debug, Clone)]
pub struct Snapshot {
    store: Arc<Store>,
    node: Arc<NodeState>,
}

impl Snapshot {
    pub(crate) fn new(store: Arc<Store>, node: Arc<NodeState>) -> Self {
        Snapshot { store, node }
    }

    pub(crate) fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub(crate) fn tensor_version(&self, tensor: &str) -> Result<&TensorVersion> {
        self.node.tensor(tensor)
    }

    pub(crate) fn reader(&self, tensor: &str) -> Result<TensorReader<'_>> {
        Ok(TensorReader {
            store: &self.store,
            chain: &self.node.chain,
            tv: self.node.tensor(tensor)?,
            pending: None,
        })
    }

    /// Snapshot of another branch head or commit of the same dataset.
    pub fn at(&self, version: &str) -> Result<Snapshot> {
        let tree = self.store.load_tree()?;
        let id = super::vc::resolve_target(&tree, version)?;
        if id == self.node.id {
            return Ok(self.clone());
        }
        let node = NodeState::load(&self.store, &id, tree.ancestors(&id)?)?;
        Ok(Snapshot::new(self.store.clone(), Arc::new(node)))
    }

    /// Id of the version node this snapshot is pinned to.
    pub fn commit_id(&self) -> &str {
        &self.node.id
    }

    pub fn label(&self) -> &str {
        &self.store.label
    }

    /// Current version tree of the dataset, read without taking a lock.
    pub fn version_tree(&self) -> Result<VersionTree> {
        self.store.load_tree()
    }

    /// Commits reachable from this snapshot's node, newest first.
    pub fn log(&self) -> Result<Vec<CommitNode>> {
        self.store.load_tree()?.log(&self.node.id)
    }

    pub fn provider(&self) -> &SharedProvider {
        &self.store.provider
    }

    pub fn register_link_provider(&self, scheme: &str, provider: SharedProvider) {
        self.store.links.write().register(scheme, provider);
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.node.tensors.keys().cloned().collect()
    }

    pub fn has_tensor(&self, tensor: &str) -> bool {
        self.node.tensors.contains_key(tensor)
    }

    pub fn schema(&self, tensor: &str) -> Result<&HtypeSchema> {
        Ok(&self.node.tensor(tensor)?.meta.schema)
    }

    pub fn schemas(&self) -> Vec<HtypeSchema> {
        self.node.tensors.values().map(|t| t.meta.schema.clone()).collect()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        groups_of(&self.node)
    }

    pub fn policy(&self, tensor: &str) -> Result<ChunkPolicy> {
        Ok(self.node.tensor(tensor)?.meta.policy)
    }

    pub fn len(&self, tensor: &str) -> Result<u64> {
        Ok(self.node.tensor(tensor)?.len())
    }

    pub fn num_rows(&self) -> u64 {
        rows_of(&self.node)
    }

    pub fn read(&self, tensor: &str, index: u64) -> Result<DynArray> {
        self.reader(tensor)?.read(index)
    }

    pub fn read_many(&self, tensor: &str, indices: &[u64]) -> Result<Vec<DynArray>> {
        let r = self.reader(tensor)?;
        indices.iter().map(|&i| r.read(i)).collect()
    }

    pub fn read_region(&self, tensor: &str, index: u64, region: &[Range<usize>]) -> Result<DynArray> {
        self.reader(tensor)?.read_region(index, region)
    }

    pub fn read_link(&self, tensor: &str, index: u64) -> Result<LinkedSample> {
        self.reader(tensor)?.read_link(index)
    }

    pub fn shape(&self, tensor: &str, index: u64) -> Result<Vec<usize>> {
        self.reader(tensor)?.shape(index)
    }

    pub fn sample_id(&self, tensor: &str, index: u64) -> Result<u64> {
        let r = self.reader(tensor)?;
        r.check(index)?;
        Ok(r.tv.ids[index as usize])
    }

    pub fn sample_ids(&self, tensor: &str) -> Result<&[u64]> {
        Ok(&self.node.tensor(tensor)?.ids)
    }

    pub fn tile_entry(&self, tensor: &str, index: u64) -> Result<Option<&TileEntry>> {
        Ok(self.node.tensor(tensor)?.tiles.entries.get(&index))
    }

    /// Storage key holding chunk `name` as seen from this node.
    pub fn resolve_chunk(&self, tensor: &str, name: &str) -> Result<StorageKey> {
        self.reader(tensor)?.resolve(name)
    }

    /// Share of the tensor's chunks that a rechunk would rewrite.
    pub fn fragmentation(&self, tensor: &str) -> Result<f64> {
        let (bad, total) = super::write::fragmented_chunks(self.node.tensor(tensor)?);
        Ok(if total == 0 { 0.0 } else { bad as f64 / total as f64 })
    }

    /// Every chunk object referenced by the tensor, in index order, with tiles last.
    pub fn chunk_layout(&self, tensor: &str) -> Result<Vec<ChunkInfo>> {
        let r = self.reader(tensor)?;
        let tv = r.tv;
        let info = |id: ChunkId, role| -> Result<ChunkInfo> {
            let stat = tv.stat(id);
            Ok(ChunkInfo {
                name: tv.chunk_name(id).to_string(),
                key: r.chunk_key(id)?.to_string(),
                payload_bytes: stat.payload,
                samples: stat.samples,
                role,
            })
        };
        let runs: Vec<_> = tv.chunks.runs().collect();
        let mut out = Vec::new();
        for (i, (chunk, range)) in runs.iter().enumerate() {
            if tv.tiles.entries.contains_key(&range.start) {
                continue;
            }
            let next_untiled = runs
                .get(i + 1)
                .is_some_and(|(_, r)| !tv.tiles.entries.contains_key(&r.start));
            out.push(info(*chunk, if next_untiled { ChunkRole::Body } else { ChunkRole::Tail })?);
        }
        for entry in tv.tiles.entries.values() {
            for &c in &entry.chunks {
                out.push(info(c, ChunkRole::Tile)?);
            }
        }
        Ok(out)
    }
}
