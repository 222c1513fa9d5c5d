//! Per-version tensor metadata and its persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::store::{node_key, tensor_key, Store};
use crate::error::{Error, Result};
use crate::format::{ChunkEncoder, ChunkId, ChunkPolicy, HtypeSchema, ShapeEncoder};

/// Size bookkeeping for one chunk object.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkStat {
    /// Payload bytes, including slack left by in-place updates.
    pub payload: u64,
    /// Bytes of the payload no longer referenced by any sample.
    pub stale: u64,
    /// Stored size of the first sample.
    pub first: u64,
    pub samples: u32,
}

/// Contents of `tensor_meta.json`: the schema fields verbatim plus layout state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    #[serde(flatten)]
    pub schema: HtypeSchema,
    pub policy: ChunkPolicy,
    pub length: u64,
    /// Chunk ordinal to object name.
    pub chunk_names: Vec<String>,
    pub chunk_stats: Vec<ChunkStat>,
}

/// Spatial tiling of one oversized sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileEntry {
    pub sample_shape: Vec<usize>,
    pub tile_shape: Vec<usize>,
    pub grid_shape: Vec<usize>,
    /// One chunk per tile in row-major grid order.
    pub chunks: Vec<ChunkId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileMap {
    pub entries: BTreeMap<u64, TileEntry>,
}

/// Indices added and updated within one version node.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitDiff {
    pub added: Option<Range<u64>>,
    pub updated: BTreeSet<u64>,
}

impl CommitDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_none() && self.updated.is_empty()
    }

    pub fn record_append(&mut self, index: u64) {
        self.added = Some(match self.added.take() {
            Some(r) => r.start.min(index)..r.end.max(index + 1),
            None => index..index + 1,
        });
    }
}

/// Full state of one tensor at one version node.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorVersion {
    pub meta: TensorMeta,
    pub chunks: ChunkEncoder,
    pub shapes: ShapeEncoder,
    pub tiles: TileMap,
    pub ids: Vec<u64>,
    /// Chunk names written at this node.
    pub chunk_set: BTreeSet<String>,
    pub diff: CommitDiff,
    /// Chunk names of this node visible to a live snapshot. Rewriting one
    /// allocates a fresh name instead of overwriting the object.
    pub shared: BTreeSet<String>,
}

impl TensorVersion {
    pub fn new(schema: HtypeSchema, policy: ChunkPolicy) -> Self {
        TensorVersion {
            meta: TensorMeta {
                schema,
                policy,
                length: 0,
                chunk_names: Vec::new(),
                chunk_stats: Vec::new(),
            },
            chunks: ChunkEncoder::new(),
            shapes: ShapeEncoder::new(),
            tiles: TileMap::default(),
            ids: Vec::new(),
            chunk_set: BTreeSet::new(),
            diff: CommitDiff::default(),
            shared: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> u64 {
        self.meta.length
    }

    pub fn name(&self) -> &str {
        &self.meta.schema.name
    }

    pub fn chunk_name(&self, id: ChunkId) -> &str {
        &self.meta.chunk_names[id.0 as usize]
    }

    pub fn stat(&self, id: ChunkId) -> ChunkStat {
        self.meta.chunk_stats[id.0 as usize]
    }

    /// Registers a fresh chunk name and returns its ordinal.
    pub fn new_chunk(&mut self) -> ChunkId {
        let id = ChunkId(self.meta.chunk_names.len() as u64);
        self.meta.chunk_names.push(hex::encode(rand::random::<[u8; 8]>()));
        self.meta.chunk_stats.push(ChunkStat::default());
        id
    }

    /// Copy of this state as the starting point of a child node.
    pub fn child(&self) -> Self {
        TensorVersion {
            chunk_set: BTreeSet::new(),
            diff: CommitDiff::default(),
            shared: BTreeSet::new(),
            ..self.clone()
        }
    }

    /// Every chunk referenced by the encoder or the tile map.
    pub fn live_chunks(&self) -> Vec<ChunkId> {
        let mut out = self.chunks.chunks();
        for entry in self.tiles.entries.values() {
            out.extend(entry.chunks.iter().skip(1));
        }
        out
    }

    pub fn load(store: &Store, node: &str, tensor: &str) -> Result<Self> {
        let k = |f: &str| tensor_key(node, tensor, f);
        let meta: TensorMeta = store.get_json(&k("tensor_meta.json"))?;
        let chunks = ChunkEncoder::from_bytes(&store.get(&k("chunk_encoder"))?)?;
        let shapes = ShapeEncoder::from_bytes(&store.get(&k("shape_encoder"))?)?;
        let tiles: TileMap = store.get_json(&k("tile_map"))?;
        let raw_ids = store.get(&k("sample_ids"))?;
        if raw_ids.len() % 8 != 0 {
            return Err(Error::metadata(k("sample_ids").as_str(), "length is not a multiple of 8"));
        }
        let ids = raw_ids
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<_>>();
        let chunk_set = store.get_json(&k("chunk_set.json"))?;
        let diff = store.get_json(&k("commit_diff.json"))?;
        let tv = TensorVersion {
            meta,
            chunks,
            shapes,
            tiles,
            ids,
            chunk_set,
            diff,
            shared: BTreeSet::new(),
        };
        let n = tv.meta.length;
        if tv.chunks.num_samples() != n || tv.shapes.num_samples() != n || tv.ids.len() as u64 != n {
            return Err(Error::metadata(
                k("tensor_meta.json").as_str(),
                "encoders disagree with tensor length",
            ));
        }
        Ok(tv)
    }

    pub fn save(&self, store: &Store, node: &str) -> Result<()> {
        let tensor = self.name();
        let k = |f: &str| tensor_key(node, tensor, f);
        store.put_json(&k("tensor_meta.json"), &self.meta)?;
        store.put(&k("chunk_encoder"), self.chunks.to_bytes())?;
        store.put(&k("shape_encoder"), self.shapes.to_bytes())?;
        store.put_json(&k("tile_map"), &self.tiles)?;
        let mut ids = Vec::with_capacity(self.ids.len() * 8);
        for id in &self.ids {
            ids.extend_from_slice(&id.to_le_bytes());
        }
        store.put(&k("sample_ids"), ids)?;
        store.put_json(&k("chunk_set.json"), &self.chunk_set)?;
        store.put_json(&k("commit_diff.json"), &self.diff)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct NodeManifest {
    tensors: Vec<String>,
}

/// All tensors at one version node, plus the node's ancestry.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: String,
    /// This node followed by its ancestors, up to the root.
    pub chain: Vec<String>,
    pub tensors: BTreeMap<String, TensorVersion>,
}

impl NodeState {
    pub fn tensor(&self, name: &str) -> Result<&TensorVersion> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut TensorVersion> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn tensor_names(store: &Store, node: &str) -> Result<Vec<String>> {
        Ok(store
            .get_json::<NodeManifest>(&node_key(node, "tensors.json"))?
            .tensors)
    }

    pub fn load(store: &Store, id: &str, chain: Vec<String>) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for name in Self::tensor_names(store, id)? {
            let tv = TensorVersion::load(store, id, &name)?;
            tensors.insert(name, tv);
        }
        Ok(NodeState {
            id: id.to_string(),
            chain,
            tensors,
        })
    }

    pub fn save(&self, store: &Store) -> Result<()> {
        for tv in self.tensors.values() {
            tv.save(store, &self.id)?;
        }
        self.save_manifest(store)
    }

    pub fn save_manifest(&self, store: &Store) -> Result<()> {
        let manifest = NodeManifest {
            tensors: self.tensors.keys().cloned().collect(),
        };
        store.put_json(&node_key(&self.id, "tensors.json"), &manifest)
    }

    /// Fresh child node starting from this node's state.
    pub fn child(&self, id: String) -> Self {
        let mut chain = Vec::with_capacity(self.chain.len() + 1);
        chain.push(id.clone());
        chain.extend(self.chain.iter().cloned());
        NodeState {
            id,
            chain,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.child()))
                .collect(),
        }
    }

    pub fn has_changes(&self) -> bool {
        self.tensors
            .values()
            .any(|t| !t.chunk_set.is_empty() || !t.diff.is_empty())
    }
}
