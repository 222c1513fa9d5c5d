//! Datasets: parallel tensors sharing row indices, stored as versioned chunks.
//!
//! A [`Dataset`] is a handle on one branch (or, read-only, on one commit).
//! Writes land in the branch's working node; [`Dataset::commit`] freezes it.
//! [`Snapshot`] is an immutable, cheaply clonable read handle pinned to one
//! node, used by queries, views and the loader.

mod link;
mod read;
mod snapshot;
mod state;
mod store;
mod tiling;
mod vc;
mod write;

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use link::{LinkedSample, SampleInput};
pub use snapshot::{ChunkInfo, ChunkRole, Snapshot};
pub use state::{ChunkStat, TileEntry};
pub use vc::CheckoutOptions;
pub use write::RechunkStats;

pub(crate) use read::TensorReader;
pub(crate) use state::{NodeState, TensorVersion};
pub(crate) use store::{Store, LINEAGE};

use crate::array::DynArray;
use crate::error::{Error, Result};
use crate::format::{ChunkPolicy, HtypeSchema};
use crate::storage::{FileSystemProvider, SharedProvider};
use crate::version::{new_id, now_millis, CommitInfo, VersionTree, DEFAULT_BRANCH};
use store::{key, lock_key, DATASET_META, VC_INFO};
use write::Working;

pub const FORMAT_VERSION: u32 = 1;

/// Contents of `dataset_meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub policy: ChunkPolicy,
    /// Reject writes past the end of a tensor instead of padding with empty samples.
    pub strict: bool,
    pub created: u64,
}

#[derive(Debug, Clone)]
pub struct CreateOptions {
    pub policy: ChunkPolicy,
    pub strict: bool,
    /// Human-readable location recorded in lineage files.
    pub label: String,
}

impl Default for CreateOptions {
    fn default() -> Self {
        CreateOptions {
            policy: ChunkPolicy::default(),
            strict: true,
            label: "dataset".into(),
        }
    }
}

#[derive(Debug)]
enum Head {
    Branch(Working),
    Detached(Arc<NodeState>),
}

/// Read-write handle on a dataset.
#[derive(Debug)]
pub struct Dataset {
    store: Arc<Store>,
    head: Head,
    meta: DatasetMeta,
    /// Branch whose lock this handle holds.
    lock: Option<String>,
    token: String,
}

fn check_schemas(schemas: &[HtypeSchema]) -> Result<()> {
    let mut names = BTreeSet::new();
    for s in schemas {
        s.validate().map_err(|e| Error::InvalidSchema(e.to_string()))?;
        if s.name.split('/').any(|seg| seg == "chunks") {
            return Err(Error::InvalidSchema(format!("{}: `chunks` is a reserved name", s.name)));
        }
        if !names.insert(s.name.as_str()) {
            return Err(Error::InvalidSchema(format!("duplicate tensor `{}`", s.name)));
        }
    }
    for a in &names {
        if names.iter().any(|b| b.starts_with(&format!("{a}/"))) {
            return Err(Error::InvalidSchema(format!("`{a}` is both a tensor and a group")));
        }
    }
    Ok(())
}

pub(crate) fn valid_branch_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !name.starts_with('.')
}

impl Dataset {
    pub fn create(provider: SharedProvider, schemas: Vec<HtypeSchema>, policy: ChunkPolicy) -> Result<Self> {
        Self::create_with(
            provider,
            schemas,
            CreateOptions {
                policy,
                ..Default::default()
            },
        )
    }

    /// Creates a dataset on the local filesystem.
    pub fn create_local(path: impl AsRef<Path>, schemas: Vec<HtypeSchema>, policy: ChunkPolicy) -> Result<Self> {
        let path = path.as_ref();
        let provider = Arc::new(FileSystemProvider::new(path)?);
        Self::create_with(
            provider,
            schemas,
            CreateOptions {
                policy,
                label: path.display().to_string(),
                ..Default::default()
            },
        )
    }

    pub fn create_with(provider: SharedProvider, schemas: Vec<HtypeSchema>, opts: CreateOptions) -> Result<Self> {
        if !provider.list("")?.is_empty() {
            return Err(Error::AlreadyExists(opts.label));
        }
        check_schemas(&schemas)?;
        opts.policy.validate()?;
        let store = Arc::new(Store::new(provider, opts.label));
        let meta = DatasetMeta {
            format_version: FORMAT_VERSION,
            policy: opts.policy,
            strict: opts.strict,
            created: now_millis(),
        };
        store.put_json(&key(DATASET_META), &meta)?;

        let root_id = new_id();
        let root = NodeState {
            id: root_id.clone(),
            chain: vec![root_id.clone()],
            tensors: schemas
                .into_iter()
                .map(|s| (s.name.clone(), TensorVersion::new(s, opts.policy)))
                .collect(),
        };
        root.save(&store)?;
        let work = root.child(new_id());
        work.save(&store)?;

        let mut tree = VersionTree::default();
        tree.commits.insert(
            root_id.clone(),
            CommitInfo {
                parent: None,
                branch: DEFAULT_BRANCH.into(),
                message: Some("initial commit".into()),
                timestamp: Some(meta.created),
                committed: true,
            },
        );
        tree.commits.insert(
            work.id.clone(),
            CommitInfo {
                parent: Some(root_id),
                branch: DEFAULT_BRANCH.into(),
                message: None,
                timestamp: None,
                committed: false,
            },
        );
        tree.branches.insert(DEFAULT_BRANCH.into(), work.id.clone());
        store.put_json(&key(VC_INFO), &tree)?;

        let parent_tensors = work.tensors.keys().cloned().collect();
        let mut ds = Dataset {
            store,
            head: Head::Branch(Working {
                branch: DEFAULT_BRANCH.into(),
                node: work,
                pending: Default::default(),
                parent_tensors,
                unsaved: false,
                dense: false,
            }),
            meta,
            lock: None,
            token: new_id(),
        };
        ds.acquire_lock(DEFAULT_BRANCH)?;
        Ok(ds)
    }

    /// Opens the `main` branch for writing.
    pub fn open(provider: SharedProvider) -> Result<Self> {
        Self::open_branch(provider, DEFAULT_BRANCH, "dataset")
    }

    pub fn open_local(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotADataset(path.display().to_string()));
        }
        let provider = Arc::new(FileSystemProvider::new(path)?);
        Self::open_branch(provider, DEFAULT_BRANCH, &path.display().to_string())
    }

    /// Opens `branch` for writing, taking its lock.
    pub fn open_branch(provider: SharedProvider, branch: &str, label: &str) -> Result<Self> {
        let store = Arc::new(Store::new(provider, label.to_string()));
        let meta = Self::read_meta(&store)?;
        let tree = store.load_tree()?;
        let working = Self::load_working(&store, &tree, branch)?;
        let mut ds = Dataset {
            store,
            head: Head::Branch(working),
            meta,
            lock: None,
            token: new_id(),
        };
        ds.acquire_lock(branch)?;
        Ok(ds)
    }

    /// Opens a read-only snapshot of a branch head or commit without taking a lock.
    pub fn open_snapshot(provider: SharedProvider, version: &str, label: &str) -> Result<Snapshot> {
        let store = Arc::new(Store::new(provider, label.to_string()));
        Self::read_meta(&store)?;
        let tree = store.load_tree()?;
        let id = vc::resolve_target(&tree, version)?;
        let node = NodeState::load(&store, &id, tree.ancestors(&id)?)?;
        Ok(Snapshot::new(store, Arc::new(node)))
    }

    fn read_meta(store: &Store) -> Result<DatasetMeta> {
        match store.get_json(&key(DATASET_META)) {
            Err(Error::Storage(e)) if e.is_not_found() => Err(Error::NotADataset(store.label.clone())),
            other => other,
        }
    }

    fn load_working(store: &Store, tree: &VersionTree, branch: &str) -> Result<Working> {
        let id = tree.head(branch)?.to_string();
        let node = NodeState::load(store, &id, tree.ancestors(&id)?)?;
        let parent_tensors = match &tree.node(&id)?.parent {
            Some(p) => NodeState::tensor_names(store, p)?.into_iter().collect(),
            None => BTreeSet::new(),
        };
        Ok(Working {
            branch: branch.to_string(),
            node,
            pending: Default::default(),
            parent_tensors,
            unsaved: false,
            dense: false,
        })
    }

    fn acquire_lock(&mut self, branch: &str) -> Result<()> {
        let k = lock_key(branch);
        match self.store.get(&k) {
            Ok(held) if held.as_ref() != self.token.as_bytes() => {
                return Err(Error::BranchLocked(branch.into()))
            }
            Ok(_) => {}
            Err(Error::Storage(e)) if e.is_not_found() => {}
            Err(e) => return Err(e),
        }
        self.store.put(&k, self.token.clone().into_bytes())?;
        self.lock = Some(branch.to_string());
        Ok(())
    }

    fn release_lock(&mut self) -> Result<()> {
        if let Some(branch) = self.lock.take() {
            let k = lock_key(&branch);
            if matches!(self.store.get(&k), Ok(held) if held.as_ref() == self.token.as_bytes()) {
                self.store.provider.delete(&k)?;
            }
        }
        Ok(())
    }

    /// Takes the lock of `branch` and releases any other lock held.
    fn switch_lock(&mut self, branch: Option<&str>) -> Result<()> {
        let previous = self.lock.take();
        if let Some(b) = branch {
            if let Err(e) = self.acquire_lock(b) {
                self.lock = previous;
                return Err(e);
            }
        }
        if let Some(p) = previous.filter(|p| Some(p.as_str()) != branch) {
            let held = std::mem::replace(&mut self.lock, Some(p));
            self.release_lock()?;
            self.lock = held;
        }
        Ok(())
    }

    /// Removes a lock left behind by a writer that exited without releasing it.
    pub fn force_unlock(provider: &SharedProvider, branch: &str) -> Result<()> {
        Ok(provider.delete(&lock_key(branch))?)
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn label(&self) -> &str {
        &self.store.label
    }

    pub fn provider(&self) -> &SharedProvider {
        &self.store.provider
    }

    pub fn is_strict(&self) -> bool {
        self.meta.strict
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.meta.strict = strict;
    }

    /// Makes `scheme://` URLs of linked samples resolvable through `provider`.
    pub fn register_link_provider(&self, scheme: &str, provider: SharedProvider) {
        self.store.links.write().register(scheme, provider);
    }

    fn node(&self) -> &NodeState {
        match &self.head {
            Head::Branch(w) => &w.node,
            Head::Detached(n) => n,
        }
    }

    fn reader(&self, tensor: &str) -> Result<TensorReader<'_>> {
        match &self.head {
            Head::Branch(w) => w.reader(&self.store, tensor),
            Head::Detached(n) => Ok(TensorReader {
                store: &self.store,
                chain: &n.chain,
                tv: n.tensor(tensor)?,
                pending: None,
            }),
        }
    }

    /// Appends fill each chunk up to the max size (used when rewriting data).
    pub(crate) fn set_dense_packing(&mut self, dense: bool) -> Result<()> {
        self.working()?.dense = dense;
        Ok(())
    }

    fn working(&mut self) -> Result<&mut Working> {
        match &mut self.head {
            Head::Branch(w) => Ok(w),
            Head::Detached(n) => Err(Error::ReadOnlyVersion(n.id.clone())),
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.node().tensors.keys().cloned().collect()
    }

    pub fn schema(&self, tensor: &str) -> Result<&HtypeSchema> {
        Ok(&self.node().tensor(tensor)?.meta.schema)
    }

    pub fn schemas(&self) -> Vec<HtypeSchema> {
        self.node().tensors.values().map(|t| t.meta.schema.clone()).collect()
    }

    /// Group paths implied by slash-separated tensor names.
    pub fn groups(&self) -> BTreeSet<String> {
        snapshot::groups_of(self.node())
    }

    pub fn policy(&self, tensor: &str) -> Result<ChunkPolicy> {
        Ok(self.node().tensor(tensor)?.meta.policy)
    }

    pub fn len(&self, tensor: &str) -> Result<u64> {
        Ok(self.node().tensor(tensor)?.len())
    }

    /// Number of complete rows: the shortest tensor length.
    pub fn num_rows(&self) -> u64 {
        snapshot::rows_of(self.node())
    }

    pub fn read(&self, tensor: &str, index: u64) -> Result<DynArray> {
        self.reader(tensor)?.read(index)
    }

    pub fn read_many(&self, tensor: &str, indices: &[u64]) -> Result<Vec<DynArray>> {
        let r = self.reader(tensor)?;
        indices.iter().map(|&i| r.read(i)).collect()
    }

    pub fn read_range(&self, tensor: &str, range: Range<u64>) -> Result<Vec<DynArray>> {
        let r = self.reader(tensor)?;
        range.map(|i| r.read(i)).collect()
    }

    /// Reads a sub-array; for tiled samples only the intersecting tiles are fetched.
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
        Ok(&self.node().tensor(tensor)?.ids)
    }

    pub fn tile_entry(&self, tensor: &str, index: u64) -> Result<Option<&TileEntry>> {
        Ok(self.node().tensor(tensor)?.tiles.entries.get(&index))
    }

    /// Fraction of non-tile chunks that a rechunk would rewrite.
    pub fn fragmentation(&self, tensor: &str) -> Result<f64> {
        let (bad, total) = write::fragmented_chunks(self.node().tensor(tensor)?);
        Ok(if total == 0 { 0.0 } else { bad as f64 / total as f64 })
    }

    pub fn append(&mut self, tensor: &str, sample: impl Into<SampleInput>) -> Result<u64> {
        let store = self.store.clone();
        self.working()?.append(&store, tensor, sample.into(), None)
    }

    pub(crate) fn append_with_id(&mut self, tensor: &str, sample: SampleInput, id: u64) -> Result<u64> {
        let store = self.store.clone();
        self.working()?.append(&store, tensor, sample, Some(id))
    }

    /// Appends one sample to every tensor. All samples are validated before any is written.
    pub fn append_row<S: Into<SampleInput>>(&mut self, row: impl IntoIterator<Item = (String, S)>) -> Result<u64> {
        let row: Vec<(String, SampleInput)> = row.into_iter().map(|(k, v)| (k, v.into())).collect();
        let names = self.tensor_names();
        let given: BTreeSet<&str> = row.iter().map(|(k, _)| k.as_str()).collect();
        if given.len() != row.len() || given != names.iter().map(String::as_str).collect() {
            return Err(Error::InvalidSchema(format!(
                "a row needs exactly one sample for each of {names:?}"
            )));
        }
        for (t, s) in &row {
            write::prepare(self.node().tensor(t)?, s.clone())?;
        }
        let mut index = 0;
        for (t, s) in row {
            index = self.append(&t, s)?;
        }
        Ok(index)
    }

    /// Replaces the sample at `index`. Outside strict mode an index past the
    /// end pads the tensor with empty samples first.
    pub fn update(&mut self, tensor: &str, index: u64, sample: impl Into<SampleInput>) -> Result<()> {
        let store = self.store.clone();
        let strict = self.meta.strict;
        self.working()?.update(&store, tensor, index, sample.into(), strict)
    }

    /// Adds an empty tensor to the working node.
    pub fn add_tensor(&mut self, schema: HtypeSchema, policy: Option<ChunkPolicy>) -> Result<()> {
        let policy = policy.unwrap_or(self.meta.policy);
        policy.validate()?;
        let mut all = self.schemas();
        all.push(schema.clone());
        check_schemas(&all)?;
        let store = self.store.clone();
        let w = self.working()?;
        w.node
            .tensors
            .insert(schema.name.clone(), TensorVersion::new(schema, policy));
        w.unsaved = true;
        w.flush(&store)
    }

    pub fn rechunk(&mut self, tensor: &str) -> Result<RechunkStats> {
        let store = self.store.clone();
        let stats = self.working()?.rechunk(&store, tensor)?;
        self.flush()?;
        Ok(stats)
    }

    /// Persists all buffered chunks and metadata of the working node.
    pub fn flush(&mut self) -> Result<()> {
        let store = self.store.clone();
        match &mut self.head {
            Head::Branch(w) => {
                w.flush(&store)?;
                store.put_json(&key(DATASET_META), &self.meta)
            }
            Head::Detached(_) => Ok(()),
        }
    }

    /// Flushes and returns an immutable read handle on the current node.
    pub fn snapshot(&mut self) -> Result<Snapshot> {
        self.flush()?;
        let node = match &mut self.head {
            Head::Branch(w) => {
                for tv in w.node.tensors.values_mut() {
                    tv.shared = tv.chunk_set.clone();
                }
                Arc::new(w.node.clone())
            }
            Head::Detached(n) => n.clone(),
        };
        Ok(Snapshot::new(self.store.clone(), node))
    }

    /// Chunk objects of a tensor at the current node.
    pub fn chunk_layout(&mut self, tensor: &str) -> Result<Vec<ChunkInfo>> {
        self.snapshot()?.chunk_layout(tensor)
    }
}

impl Drop for Dataset {
    fn drop(&mut self) {
        let _ = self.flush();
        let _ = self.release_lock();
    }
}
