//! Sample reads against one tensor at one version node.

use std::ops::Range;
use std::sync::Arc;

use bytes::Bytes;
use parking_lot::Mutex;

use super::link::LinkedSample;
use super::state::TensorVersion;
use super::store::{chunk_key, Store};
use super::tiling;
use crate::array::DynArray;
use crate::error::{Error, Result};
use crate::format::{ChunkBuilder, ChunkId, ChunkView};
use crate::storage::StorageKey;

/// The open tail chunk of a tensor on a writable branch, not yet persisted
/// in its latest form.
#[derive(Debug)]
pub(crate) struct Pending {
    pub id: ChunkId,
    pub builder: ChunkBuilder,
    view: Mutex<Option<Arc<ChunkView>>>,
}

impl Pending {
    pub fn new(id: ChunkId, builder: ChunkBuilder) -> Self {
        Pending {
            id,
            builder,
            view: Mutex::new(None),
        }
    }

    pub fn push_stored(&mut self, shape: &[usize], stored: &[u8]) {
        self.builder.push_stored(shape, stored);
        *self.view.get_mut() = None;
    }

    pub fn view(&self) -> Result<Arc<ChunkView>> {
        let mut slot = self.view.lock();
        if let Some(v) = slot.as_ref() {
            return Ok(v.clone());
        }
        let v = Arc::new(ChunkView::new(self.builder.finish().into())?);
        *slot = Some(v.clone());
        Ok(v)
    }
}

pub(crate) struct TensorReader<'a> {
    pub store: &'a Store,
    pub chain: &'a [String],
    pub tv: &'a TensorVersion,
    pub pending: Option<&'a Pending>,
}

impl<'a> TensorReader<'a> {
    /// Storage key of a chunk: the copy under the nearest node (starting at
    /// this one) whose chunk set names it.
    pub fn resolve(&self, name: &str) -> Result<StorageKey> {
        let tensor = self.tv.name();
        if self.tv.chunk_set.contains(name) {
            return Ok(chunk_key(&self.chain[0], tensor, name));
        }
        for node in &self.chain[1..] {
            if self.store.committed_chunk_set(node, tensor)?.contains(name) {
                return Ok(chunk_key(node, tensor, name));
            }
        }
        Err(Error::ChunkNotFound {
            tensor: tensor.to_string(),
            chunk: name.to_string(),
        })
    }

    pub fn chunk_key(&self, id: ChunkId) -> Result<StorageKey> {
        self.resolve(self.tv.chunk_name(id))
    }

    pub fn chunk(&self, id: ChunkId) -> Result<Arc<ChunkView>> {
        if let Some(p) = self.pending.filter(|p| p.id == id) {
            return p.view();
        }
        self.store.chunk(&self.chunk_key(id)?)
    }

    pub fn check(&self, index: u64) -> Result<()> {
        if index >= self.tv.len() {
            return Err(Error::IndexOutOfRange {
                tensor: self.tv.name().to_string(),
                index,
                len: self.tv.len(),
            });
        }
        Ok(())
    }

    pub fn shape(&self, index: u64) -> Result<Vec<usize>> {
        self.check(index)?;
        Ok(self.tv.shapes.shape(index)?)
    }

    fn read_stored(&self, index: u64) -> Result<DynArray> {
        let (id, local) = self.tv.chunks.lookup(index)?;
        let view = self.chunk(id)?;
        Ok(view.sample(local as usize, self.tv.meta.schema.dtype)?)
    }

    pub fn read_link(&self, index: u64) -> Result<LinkedSample> {
        self.check(index)?;
        let raw = self.read_stored(index)?.to_le_bytes();
        LinkedSample::from_stored(&raw)
            .ok_or_else(|| Error::metadata(self.tv.name(), format!("row {index} holds a malformed link")))
    }

    pub fn read(&self, index: u64) -> Result<DynArray> {
        self.check(index)?;
        let schema = &self.tv.meta.schema;
        if schema.is_link() {
            let stored = self.read_stored(index)?;
            if stored.is_empty() {
                return Ok(stored);
            }
            let link = LinkedSample::from_stored(&stored.to_le_bytes()).ok_or_else(|| {
                Error::metadata(self.tv.name(), format!("row {index} holds a malformed link"))
            })?;
            let bytes = self.fetch_link(index, &link)?;
            return Ok(DynArray::from_vec(&[bytes.len()], bytes.to_vec()));
        }
        if let Some(entry) = self.tv.tiles.entries.get(&index) {
            let full: Vec<Range<usize>> = entry.sample_shape.iter().map(|&d| 0..d).collect();
            return self.read_tiles(index, &full);
        }
        self.read_stored(index)
    }

    fn fetch_link(&self, row: u64, link: &LinkedSample) -> Result<Bytes> {
        let url = match (&link.provider_hint, link.url.contains("://")) {
            (Some(hint), false) => format!("{hint}://{}", link.url),
            _ => link.url.clone(),
        };
        let fail = |reason: String| Error::LinkResolveFailure {
            row,
            url: link.url.clone(),
            reason,
        };
        let (provider, key) = self.store.links.read().resolve(&url).map_err(|e| fail(e.to_string()))?;
        provider.get(&key, None).map_err(|e| fail(e.to_string()))
    }

    pub fn read_region(&self, index: u64, region: &[Range<usize>]) -> Result<DynArray> {
        let shape = self.shape(index)?;
        let in_bounds = region.len() == shape.len()
            && region.iter().zip(&shape).all(|(r, &d)| r.start <= r.end && r.end <= d);
        if !in_bounds {
            return Err(Error::RegionOutOfBounds {
                region: region.to_vec(),
                shape,
            });
        }
        if self.tv.tiles.entries.contains_key(&index) {
            return self.read_tiles(index, region);
        }
        Ok(self.read(index)?.slice_region(region))
    }

    /// Assembles `region` from the tiles that intersect it.
    fn read_tiles(&self, index: u64, region: &[Range<usize>]) -> Result<DynArray> {
        let entry = &self.tv.tiles.entries[&index];
        let dtype = self.tv.meta.schema.dtype;
        let out_shape: Vec<usize> = region.iter().map(|r| r.end - r.start).collect();
        let mut out = DynArray::zeros(dtype, &out_shape);
        for (cell, &chunk) in tiling::grid_cells(&entry.grid_shape).iter().zip(&entry.chunks) {
            let covered = tiling::tile_region(cell, &entry.tile_shape, &entry.sample_shape);
            let Some(hit) = tiling::intersect(&covered, region) else {
                continue;
            };
            let tile = self.chunk(chunk)?.sample(0, dtype)?;
            let local: Vec<Range<usize>> = hit
                .iter()
                .zip(&covered)
                .map(|(h, c)| h.start - c.start..h.end - c.start)
                .collect();
            let offset: Vec<usize> = hit.iter().zip(region).map(|(h, r)| h.start - r.start).collect();
            out.assign_region(&offset, &tile.slice_region(&local));
        }
        Ok(out)
    }
}
