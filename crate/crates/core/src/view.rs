//! Dataset views and their materialization into standalone datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::DynArray;
use crate::dataset::{CreateOptions, Dataset, Snapshot, LINEAGE};
use crate::error::{Error, Result};
use crate::format::{ChunkPolicy, Htype, HtypeSchema};
use crate::loader::{self, LoaderConfig};
use crate::scalar::Dtype;
use crate::storage::{SharedProvider, StorageKey};
use crate::tql::exec::SnapshotRow;
use crate::tql::{self, Column, RowSource, Ty, Value};
use crate::version::now_millis;

/// Ordered selection of rows of a pinned snapshot, with projected columns.
#[derive(Debug, Clone)]
pub struct DatasetView {
    snapshot: Snapshot,
    query: Option<String>,
    row_order: Arc<[u64]>,
    columns: Arc<[Column]>,
    groups: Option<Vec<usize>>,
}

/// Contents of `view_<hash>.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedView {
    pub commit: String,
    pub query_text: Option<String>,
    pub row_order: Vec<u64>,
}

/// Contents of `lineage.json` in a materialized dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub source_root: String,
    pub source_commit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
    /// sha256 of the row order, little-endian u64s.
    pub index_digest: String,
    /// Present when the view did not come from a query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_order: Option<Vec<u64>>,
    pub materialized_at: u64,
}

#[derive(Debug, Clone)]
pub struct MaterializeOptions {
    /// Chunk bounds of the new dataset. Defaults to the source's per-tensor policy.
    pub policy: Option<ChunkPolicy>,
    /// Store an empty sample instead of failing when a link cannot be fetched.
    pub skip_unresolved_links: bool,
    pub label: String,
    pub workers: usize,
}

impl Default for MaterializeOptions {
    fn default() -> Self {
        MaterializeOptions {
            policy: None,
            skip_unresolved_links: false,
            label: "materialized".into(),
            workers: 4,
        }
    }
}

pub(crate) fn digest_rows(rows: &[u64]) -> String {
    let mut h = Sha256::new();
    for r in rows {
        h.update(r.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn view_key(id: &str) -> StorageKey {
    StorageKey::new(format!("view_{id}.json")).expect("valid key")
}

/// Row source over samples already fetched into memory.
pub(crate) struct MemRow<'a>(pub &'a BTreeMap<String, DynArray>);

impl RowSource for MemRow<'_> {
    fn sample(&self, tensor: &str) -> Result<DynArray> {
        self.0
            .get(tensor)
            .cloned()
            .ok_or_else(|| Error::UnknownTensor(tensor.to_string()))
    }

    fn shape(&self, tensor: &str) -> Result<Vec<usize>> {
        Ok(self.sample(tensor)?.shape().to_vec())
    }

    fn region(&self, tensor: &str, region: &[Range<usize>]) -> Result<DynArray> {
        Ok(self.sample(tensor)?.slice_region(region))
    }
}

impl DatasetView {
    pub(crate) fn from_parts(
        snapshot: Snapshot,
        query: Option<String>,
        row_order: Vec<u64>,
        columns: Vec<Column>,
        groups: Option<Vec<usize>>,
    ) -> Self {
        DatasetView {
            snapshot,
            query,
            row_order: row_order.into(),
            columns: columns.into(),
            groups,
        }
    }

    fn identity_columns(snapshot: &Snapshot) -> Vec<Column> {
        snapshot.schemas().iter().map(Column::identity).collect()
    }

    /// Every row of the snapshot, in index order.
    pub fn identity(snapshot: &Snapshot) -> Self {
        let rows = (0..snapshot.num_rows()).collect();
        Self::from_parts(snapshot.clone(), None, rows, Self::identity_columns(snapshot), None)
    }

    /// View over the given rows in the given order, projecting every tensor.
    pub fn from_indices(snapshot: &Snapshot, indices: Vec<u64>) -> Result<Self> {
        let n = snapshot.num_rows();
        let mut seen = BTreeSet::new();
        for &i in &indices {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    tensor: "<view>".into(),
                    index: i,
                    len: n,
                });
            }
            if !seen.insert(i) {
                return Err(Error::DuplicateIndex(i));
            }
        }
        Ok(Self::from_parts(
            snapshot.clone(),
            None,
            indices,
            Self::identity_columns(snapshot),
            None,
        ))
    }

    pub fn len(&self) -> usize {
        self.row_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_order.is_empty()
    }

    pub fn row_order(&self) -> &[u64] {
        &self.row_order
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    pub fn commit_id(&self) -> &str {
        self.snapshot.commit_id()
    }

    pub fn query_text(&self) -> Option<&str> {
        self.query.as_deref()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// Start offsets of ARRANGE BY groups.
    pub fn group_boundaries(&self) -> Option<&[usize]> {
        self.groups.as_deref()
    }

    /// Position ranges of ARRANGE BY groups.
    pub fn groups(&self) -> Option<Vec<Range<usize>>> {
        let b = self.groups.as_ref()?;
        Some(
            b.iter()
                .enumerate()
                .map(|(i, &s)| s..b.get(i + 1).copied().unwrap_or(self.len()))
                .collect(),
        )
    }

    /// Underlying dataset row at view position `i`.
    pub fn source_row(&self, i: usize) -> Result<u64> {
        self.row_order.get(i).copied().ok_or(Error::IndexOutOfRange {
            tensor: "<view>".into(),
            index: i as u64,
            len: self.len() as u64,
        })
    }

    /// Value of column `column` at view position `i`.
    pub fn get(&self, i: usize, column: &str) -> Result<Value> {
        let row = self.source_row(i)?;
        let c = self
            .columns
            .iter()
            .find(|c| c.name == column)
            .ok_or_else(|| Error::UnknownTensor(column.to_string()))?;
        c.eval(&SnapshotRow::new(&self.snapshot, row))
            .map_err(|e| tql::exec::at_row(row, e))
    }

    /// All projected values at view position `i`.
    pub fn row(&self, i: usize) -> Result<Vec<Value>> {
        let row = self.source_row(i)?;
        let src = SnapshotRow::new(&self.snapshot, row);
        self.columns
            .iter()
            .map(|c| c.eval(&src).map_err(|e| tql::exec::at_row(row, e)))
            .collect()
    }

    /// Sample of a base tensor at view position `i`.
    pub fn read(&self, tensor: &str, i: usize) -> Result<DynArray> {
        self.snapshot.read(tensor, self.source_row(i)?)
    }

    /// Base tensors read by the projections.
    pub fn fetch_set(&self) -> BTreeSet<String> {
        self.columns.iter().flat_map(|c| c.tensors()).collect()
    }

    pub fn to_saved(&self) -> SavedView {
        SavedView {
            commit: self.commit_id().to_string(),
            query_text: self.query.clone(),
            row_order: self.row_order.to_vec(),
        }
    }

    /// Content hash naming the saved view file.
    pub fn id(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_saved()).expect("view serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// Writes `view_<id>.json` under the dataset root and returns the id.
    pub fn save(&self) -> Result<String> {
        let id = self.id();
        let bytes = serde_json::to_vec_pretty(&self.to_saved()).expect("view serializes");
        self.snapshot.provider().put(&view_key(&id), bytes.into())?;
        Ok(id)
    }

    /// Reopens a saved view of the dataset that `any` belongs to.
    pub fn load(any: &Snapshot, id: &str) -> Result<Self> {
        let key = view_key(id);
        let bytes = any.provider().get(&key, None)?;
        let saved: SavedView = serde_json::from_slice(&bytes).map_err(|e| Error::metadata(key.as_str(), e))?;
        let snap = any.at(&saved.commit)?;
        let n = snap.num_rows();
        if let Some(&bad) = saved.row_order.iter().find(|&&r| r >= n) {
            return Err(Error::IndexOutOfRange {
                tensor: "<view>".into(),
                index: bad,
                len: n,
            });
        }
        let columns = match &saved.query_text {
            Some(q) => tql::plan(&tql::parse(q)?, &snap.schemas())?.columns,
            None => Self::identity_columns(&snap),
        };
        Ok(Self::from_parts(snap, saved.query_text, saved.row_order, columns, None))
    }

    /// Writes the view, with projections applied, as a new dataset at `dest`.
    pub fn materialize(&self, dest: SharedProvider, opts: MaterializeOptions) -> Result<Dataset> {
        if !dest.list("")?.is_empty() {
            return Err(Error::DestinationNotEmpty(opts.label.clone()));
        }
        let first = match self.row_order.first() {
            Some(&r) => Some(SnapshotRow::new(&self.snapshot, r)),
            None => None,
        };
        let mut schemas = Vec::with_capacity(self.columns.len());
        for c in self.columns.iter() {
            let sample = match (&first, &c.source) {
                (Some(src), None) => c.eval(src).ok(),
                _ => None,
            };
            schemas.push(infer_schema(c, sample.as_ref()));
        }
        let policy = match opts.policy {
            Some(p) => p,
            None => self.source_policy()?,
        };
        let mut out = Dataset::create_with(
            dest,
            schemas.clone(),
            CreateOptions {
                policy,
                strict: true,
                label: opts.label.clone(),
            },
        )?;
        out.set_dense_packing(true)?;
        let tensors: Vec<String> = self.fetch_set().into_iter().collect();
        if !tensors.is_empty() && !self.is_empty() {
            let config = LoaderConfig {
                batch_size: 16,
                shuffle: false,
                ordered_delivery: true,
                collate: false,
                tensors: Some(tensors),
                num_fetch_workers: opts.workers.max(1),
                num_decode_workers: opts.workers.max(1),
                skip_unresolved_links: opts.skip_unresolved_links,
                ..LoaderConfig::default()
            };
            for batch in loader::stream(self, config, None)? {
                let batch = batch?;
                for (k, &row) in batch.rows.iter().enumerate() {
                    let fetched = batch.sample(k);
                    let src = MemRow(&fetched);
                    let mut values = Vec::with_capacity(self.columns.len());
                    for (c, s) in self.columns.iter().zip(&schemas) {
                        let v = c.eval(&src).map_err(|e| tql::exec::at_row(row, e))?;
                        values.push((c.name.clone(), to_stored(&v, s)));
                    }
                    out.append_row(values)?;
                }
            }
        } else {
            for &row in self.row_order.iter() {
                let empty = BTreeMap::new();
                let src = MemRow(&empty);
                let mut values = Vec::with_capacity(self.columns.len());
                for (c, s) in self.columns.iter().zip(&schemas) {
                    let v = c.eval(&src).map_err(|e| tql::exec::at_row(row, e))?;
                    values.push((c.name.clone(), to_stored(&v, s)));
                }
                out.append_row(values)?;
            }
        }
        let lineage = Lineage {
            source_root: self.snapshot.label().to_string(),
            source_commit: self.commit_id().to_string(),
            query_text: self.query.clone(),
            index_digest: digest_rows(&self.row_order),
            row_order: self.query.is_none().then(|| self.row_order.to_vec()),
            materialized_at: now_millis(),
        };
        let bytes = serde_json::to_vec_pretty(&lineage).expect("lineage serializes");
        out.provider().put(&StorageKey::new(LINEAGE)?, bytes.into())?;
        out.commit_with("materialize", true)?;
        Ok(out)
    }

    fn source_policy(&self) -> Result<ChunkPolicy> {
        match self.columns.iter().find_map(|c| c.source.as_ref()) {
            Some(s) => self.snapshot.policy(&s.name),
            None => match self.snapshot.tensor_names().first() {
                Some(t) => self.snapshot.policy(t),
                None => Ok(ChunkPolicy::default()),
            },
        }
    }
}

fn infer_schema(c: &Column, first: Option<&Value>) -> HtypeSchema {
    if let Some(src) = &c.source {
        let mut s = src.clone();
        s.name = c.name.clone();
        if s.is_link() {
            s.meta = None;
            s.passthrough_codec.get_or_insert_with(|| "bytes".into());
        }
        if matches!(c.node_kind(), NodeKind::Normalize) && s.dtype != Dtype::Float32 {
            s.dtype = Dtype::Float64;
        }
        return s;
    }
    let generic = |dtype: Dtype| HtypeSchema::new(c.name.clone(), Htype::Generic).with_dtype(dtype);
    match c.ty {
        Ty::Bool | Ty::Mask(_) => generic(Dtype::Uint8),
        Ty::Int => generic(Dtype::Int64),
        Ty::Float => generic(Dtype::Float64),
        Ty::Str => HtypeSchema::new(c.name.clone(), Htype::Text),
        Ty::Num | Ty::Array(_) => {
            let dtype = first
                .and_then(Value::to_sample)
                .map_or(Dtype::Float64, |a| a.dtype());
            generic(dtype)
        }
    }
}

fn to_stored(v: &Value, schema: &HtypeSchema) -> DynArray {
    match v.to_sample() {
        Some(a) if a.dtype() == schema.dtype => a,
        Some(a) => a.cast(schema.dtype),
        None => DynArray::empty(schema.dtype, schema.sample_ndim().unwrap_or(1)),
    }
}

pub(crate) enum NodeKind {
    Normalize,
    Other,
}

impl Column {
    pub(crate) fn node_kind(&self) -> NodeKind {
        match &self.node {
            tql::plan::Node::Call {
                func: tql::Func::Normalize,
                ..
            } => NodeKind::Normalize,
            _ => NodeKind::Other,
        }
    }
}

impl Snapshot {
    /// Runs a query. A VERSION clause re-pins to that version.
    pub fn query(&self, text: &str) -> Result<DatasetView> {
        let q = tql::parse(text)?;
        let snap = match &q.version {
            Some(v) => self.at(v)?,
            None => self.clone(),
        };
        let plan = tql::plan(&q, &snap.schemas())?;
        tql::execute(&plan, &snap)
    }

    pub fn view_from_indices(&self, indices: Vec<u64>) -> Result<DatasetView> {
        DatasetView::from_indices(self, indices)
    }
}

impl Dataset {
    /// Runs a query at the current node, or at its VERSION clause if present.
    pub fn query(&mut self, text: &str) -> Result<DatasetView> {
        self.query_at(text, None)
    }

    /// Runs a query at `version`, which takes priority over a VERSION clause.
    pub fn query_at(&mut self, text: &str, version: Option<&str>) -> Result<DatasetView> {
        let q = tql::parse(text)?;
        let snap = match version.or(q.version.as_deref()) {
            Some(v) => self.snapshot_at(v)?,
            None => self.snapshot()?,
        };
        let plan = tql::plan(&q, &snap.schemas())?;
        tql::execute(&plan, &snap)
    }

    /// View over `indices` at `version` (default: current node).
    pub fn view_from_indices(&mut self, version: Option<&str>, indices: Vec<u64>) -> Result<DatasetView> {
        let snap = match version {
            Some(v) => self.snapshot_at(v)?,
            None => self.snapshot()?,
        };
        DatasetView::from_indices(&snap, indices)
    }

    pub fn load_view(&mut self, id: &str) -> Result<DatasetView> {
        DatasetView::load(&self.snapshot()?, id)
    }

    /// Lineage recorded when this dataset was materialized, if any.
    pub fn lineage(&self) -> Result<Option<Lineage>> {
        let key = StorageKey::new(LINEAGE)?;
        match self.provider().get(&key, None) {
            Ok(b) => serde_json::from_slice(&b).map(Some).map_err(|e| Error::metadata(LINEAGE, e)),
            Err(e) if e.is_not_found() => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}
