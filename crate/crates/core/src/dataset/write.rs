//! Mutations of a branch's working node: appends, updates, tiling and rechunking.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use serde::Serialize;

use super::link::SampleInput;
use super::read::{Pending, TensorReader};
use super::state::{ChunkStat, NodeState, TensorVersion, TileEntry};
use super::store::{chunk_key, Store};
use super::tiling;
use crate::array::DynArray;
use crate::error::{Error, Result};
use crate::format::{validate_sample, ChunkBuilder, ChunkEncoder, ChunkHeader, ChunkId, EncoderRow, FormatError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RechunkStats {
    pub chunks_before: usize,
    pub chunks_after: usize,
    pub bytes_moved: u64,
}

/// A validated sample ready to be written.
pub(crate) struct Prepared {
    array: DynArray,
    /// Stored form, absent for samples that will be tiled.
    stored: Option<Vec<u8>>,
}

impl Prepared {
    fn shape(&self) -> &[usize] {
        self.array.shape()
    }
}

pub(crate) fn prepare(tv: &TensorVersion, input: SampleInput) -> Result<Prepared> {
    let schema = &tv.meta.schema;
    let invalid = |source: FormatError| Error::Validation {
        tensor: schema.name.clone(),
        source,
    };
    let array = match (schema.is_link(), input) {
        (true, SampleInput::Link(link)) if !link.url.is_empty() => link.to_stored(),
        (true, SampleInput::Link(_)) => {
            return Err(invalid(FormatError::HtypeConstraint("link url is empty".into())))
        }
        (true, SampleInput::Array(a)) if a.is_empty() => a,
        (true, SampleInput::Array(_)) => {
            return Err(invalid(FormatError::HtypeConstraint(
                "link tensors take linked samples".into(),
            )))
        }
        (false, SampleInput::Link(_)) => {
            return Err(invalid(FormatError::HtypeConstraint(
                "only link tensors take linked samples".into(),
            )))
        }
        (false, SampleInput::Array(a)) => a,
    };
    validate_sample(schema, &array).map_err(invalid)?;
    let max = tv.meta.policy.max_bytes;
    if array.nbytes() as u64 > max && schema.is_tileable() {
        return Ok(Prepared { array, stored: None });
    }
    let raw = array.to_le_bytes();
    let stored = match schema.sample_compression {
        crate::format::Compression::None => raw,
        c => c.compress(&raw),
    };
    if stored.len() as u64 > max {
        return Err(Error::ChunkWriteFailure {
            tensor: schema.name.clone(),
            reason: format!(
                "sample of {} bytes exceeds the {max} byte chunk bound and {} samples cannot be tiled",
                stored.len(),
                schema.htype
            ),
        });
    }
    Ok(Prepared {
        array,
        stored: Some(stored),
    })
}

pub(crate) fn empty_sample(tv: &TensorVersion) -> DynArray {
    let schema = &tv.meta.schema;
    DynArray::empty(schema.dtype, schema.sample_ndim().unwrap_or(1))
}

/// Persists a chunk object under `node` and records it in the chunk set.
fn write_chunk(store: &Store, node: &str, tv: &mut TensorVersion, id: ChunkId, bytes: Vec<u8>) -> Result<()> {
    let header = ChunkHeader::parse(&bytes)?;
    let payload = (bytes.len() - header.header_len) as u64;
    let live: u64 = header.byte_table.iter().map(|(s, e)| e - s).sum();
    if tv.shared.remove(&tv.meta.chunk_names[id.0 as usize]) {
        let old = std::mem::replace(
            &mut tv.meta.chunk_names[id.0 as usize],
            hex::encode(rand::random::<[u8; 8]>()),
        );
        tv.chunk_set.remove(&old);
    }
    let name = tv.chunk_name(id).to_string();
    store
        .put(&chunk_key(node, tv.name(), &name), bytes)
        .map_err(|e| Error::ChunkWriteFailure {
            tensor: tv.name().to_string(),
            reason: e.to_string(),
        })?;
    tv.meta.chunk_stats[id.0 as usize] = ChunkStat {
        payload,
        stale: payload - live,
        first: header.byte_table.first().map(|(s, e)| e - s).unwrap_or(0),
        samples: header.sample_count,
    };
    tv.chunk_set.insert(name);
    Ok(())
}

/// Greedy chunk layout: a chunk is closed once it reaches the lower bound or
/// when the next sample would push it over the upper bound.
struct Packer<'s> {
    store: &'s Store,
    node: &'s str,
    current: Option<(ChunkId, ChunkBuilder)>,
    runs: Vec<(ChunkId, u64)>,
    bytes: u64,
}

impl<'s> Packer<'s> {
    fn new(store: &'s Store, node: &'s str) -> Self {
        Packer {
            store,
            node,
            current: None,
            runs: Vec::new(),
            bytes: 0,
        }
    }

    fn record(&mut self, id: ChunkId) {
        match self.runs.last_mut() {
            Some((last, n)) if *last == id => *n += 1,
            _ => self.runs.push((id, 1)),
        }
    }

    fn close(&mut self, tv: &mut TensorVersion) -> Result<()> {
        if let Some((id, builder)) = self.current.take() {
            write_chunk(self.store, self.node, tv, id, builder.finish())?;
        }
        Ok(())
    }

    fn push(&mut self, tv: &mut TensorVersion, shape: &[usize], stored: &[u8]) -> Result<()> {
        let policy = tv.meta.policy;
        let size = stored.len() as u64;
        if matches!(&self.current, Some((_, b)) if b.payload_len() + size > policy.max_bytes) {
            self.close(tv)?;
        }
        if self.current.is_none() {
            let id = tv.new_chunk();
            self.current = Some((id, ChunkBuilder::new(tv.meta.schema.sample_compression)));
        }
        let (id, builder) = self.current.as_mut().unwrap();
        let id = *id;
        builder.push_stored(shape, stored);
        let full = builder.payload_len() >= policy.min_bytes;
        self.bytes += size;
        self.record(id);
        if full {
            self.close(tv)?;
        }
        Ok(())
    }

    /// Keeps an already-written tiled sample in place.
    fn push_tiled(&mut self, tv: &mut TensorVersion, first_tile: ChunkId) -> Result<()> {
        self.close(tv)?;
        self.runs.push((first_tile, 1));
        Ok(())
    }

    fn finish(mut self, tv: &mut TensorVersion) -> Result<(Vec<(ChunkId, u64)>, u64)> {
        self.close(tv)?;
        Ok((self.runs, self.bytes))
    }
}

/// Mutable state of a branch head.
#[derive(Debug)]
pub(crate) struct Working {
    pub branch: String,
    pub node: NodeState,
    pub pending: HashMap<String, Pending>,
    /// Tensor names at the parent commit, to detect schema changes.
    pub parent_tensors: BTreeSet<String>,
    /// Changes not yet written by `flush`.
    pub unsaved: bool,
    /// Fill chunks up to the max size instead of sealing at the min size.
    pub dense: bool,
}

impl Working {
    pub fn reader<'a>(&'a self, store: &'a Store, tensor: &str) -> Result<TensorReader<'a>> {
        Ok(TensorReader {
            store,
            chain: &self.node.chain,
            tv: self.node.tensor(tensor)?,
            pending: self.pending.get(tensor),
        })
    }

    pub fn is_dirty(&self) -> bool {
        self.node.has_changes()
            || !self.pending.is_empty()
            || self.node.tensors.keys().cloned().collect::<BTreeSet<_>>() != self.parent_tensors
    }

    pub fn append(&mut self, store: &Store, tensor: &str, input: SampleInput, id: Option<u64>) -> Result<u64> {
        self.unsaved = true;
        let prepared = prepare(self.node.tensor(tensor)?, input)?;
        self.append_prepared(store, tensor, prepared, id)
    }

    fn append_prepared(&mut self, store: &Store, tensor: &str, p: Prepared, id: Option<u64>) -> Result<u64> {
        let index = self.node.tensor(tensor)?.len();
        match &p.stored {
            Some(stored) => self.push_tail(store, tensor, p.shape(), stored)?,
            None => {
                self.close(store, tensor)?;
                let node = self.node.id.clone();
                let tv = self.node.tensor_mut(tensor)?;
                let first = write_tiles(store, &node, tv, index, &p.array)?;
                tv.chunks.append(first, 1)?;
            }
        }
        let tv = self.node.tensor_mut(tensor)?;
        tv.shapes.append(p.shape(), 1);
        tv.ids.push(id.unwrap_or_else(rand::random));
        tv.meta.length += 1;
        tv.diff.record_append(index);
        Ok(index)
    }

    /// Adds a stored sample to the open tail chunk, opening or sealing chunks as needed.
    fn push_tail(&mut self, store: &Store, tensor: &str, shape: &[usize], stored: &[u8]) -> Result<()> {
        let policy = self.node.tensor(tensor)?.meta.policy;
        let size = stored.len() as u64;
        let dense = self.dense;
        let fits = |payload: u64| (dense || payload < policy.min_bytes) && payload + size <= policy.max_bytes;
        if let Some(p) = self.pending.get(tensor) {
            if !fits(p.builder.payload_len()) {
                self.close(store, tensor)?;
            }
        }
        if !self.pending.contains_key(tensor) {
            let pending = match self.reopen_tail(store, tensor, fits)? {
                Some(p) => p,
                None => {
                    let tv = self.node.tensor_mut(tensor)?;
                    let id = tv.new_chunk();
                    Pending::new(id, ChunkBuilder::new(tv.meta.schema.sample_compression))
                }
            };
            self.pending.insert(tensor.to_string(), pending);
        }
        let p = self.pending.get_mut(tensor).unwrap();
        p.push_stored(shape, stored);
        let seal_at = if dense { policy.max_bytes } else { policy.min_bytes };
        let (id, full) = (p.id, p.builder.payload_len() >= seal_at);
        self.node.tensor_mut(tensor)?.chunks.append(id, 1)?;
        if full {
            self.close(store, tensor)?;
        }
        Ok(())
    }

    /// Reloads the last chunk of the tensor as the open tail if it is
    /// undersized and still exactly matches its encoder row.
    fn reopen_tail(&self, store: &Store, tensor: &str, fits: impl Fn(u64) -> bool) -> Result<Option<Pending>> {
        let tv = self.node.tensor(tensor)?;
        let Some(row) = tv.chunks.rows().last().copied() else {
            return Ok(None);
        };
        let range = tv.chunks.row_range(tv.chunks.rows().len() - 1);
        let stat = tv.stat(row.chunk);
        let eligible = !tv.tiles.entries.contains_key(&row.last_index)
            && stat.stale == 0
            && stat.samples as u64 == range.end - range.start
            && fits(stat.payload);
        if !eligible {
            return Ok(None);
        }
        let view = self.reader(store, tensor)?.chunk(row.chunk)?;
        let mut builder = ChunkBuilder::new(view.header().compression);
        for i in 0..view.sample_count() {
            builder.push_stored(&view.header().shape(i)?, &view.stored(i)?);
        }
        Ok(Some(Pending::new(row.chunk, builder)))
    }

    /// Writes the tail chunk and closes it.
    pub fn close(&mut self, store: &Store, tensor: &str) -> Result<()> {
        if let Some(p) = self.pending.remove(tensor) {
            let node = self.node.id.clone();
            write_chunk(store, &node, self.node.tensor_mut(tensor)?, p.id, p.builder.finish())?;
        }
        Ok(())
    }

    pub fn close_all(&mut self, store: &Store) -> Result<()> {
        let names: Vec<String> = self.pending.keys().cloned().collect();
        for t in names {
            self.close(store, &t)?;
        }
        Ok(())
    }

    /// Persists tail chunks (keeping them open) and all node metadata.
    pub fn flush(&mut self, store: &Store) -> Result<()> {
        if !self.unsaved {
            return Ok(());
        }
        let node = self.node.id.clone();
        for (tensor, p) in &self.pending {
            let tv = self.node.tensors.get_mut(tensor).expect("pending tensor exists");
            write_chunk(store, &node, tv, p.id, p.builder.finish())?;
        }
        self.node.save(store)?;
        self.unsaved = false;
        Ok(())
    }

    pub fn update(&mut self, store: &Store, tensor: &str, index: u64, input: SampleInput, strict: bool) -> Result<()> {
        self.unsaved = true;
        let tv = self.node.tensor(tensor)?;
        let len = tv.len();
        let p = prepare(tv, input)?;
        if index >= len {
            if strict {
                return Err(Error::IndexOutOfRange {
                    tensor: tensor.to_string(),
                    index,
                    len,
                });
            }
            for _ in len..index {
                let empty = prepare(self.node.tensor(tensor)?, empty_sample(self.node.tensor(tensor)?).into())?;
                self.append_prepared(store, tensor, empty, None)?;
            }
            self.append_prepared(store, tensor, p, None)?;
            return Ok(());
        }
        let (chunk, run) = tv.chunks.run_of(index)?;
        if self.pending.get(tensor).is_some_and(|p| p.id == chunk) {
            self.close(store, tensor)?;
        }
        let node = self.node.id.clone();
        let old_tiled = self.node.tensor(tensor)?.tiles.entries.contains_key(&index);
        if old_tiled {
            let tv = self.node.tensor_mut(tensor)?;
            tv.tiles.entries.remove(&index);
            let first = match &p.stored {
                None => write_tiles(store, &node, tv, index, &p.array)?,
                Some(stored) => {
                    let id = tv.new_chunk();
                    let mut b = ChunkBuilder::new(tv.meta.schema.sample_compression);
                    b.push_stored(p.shape(), stored);
                    write_chunk(store, &node, tv, id, b.finish())?;
                    id
                }
            };
            tv.chunks.replace_range(index, index + 1, &[(first, 1)])?;
        } else {
            let view = self.reader(store, tensor)?.chunk(chunk)?;
            let local = (index - run.start) as usize;
            let tv = self.node.tensor_mut(tensor)?;
            let max = tv.meta.policy.max_bytes;
            let replaced = match &p.stored {
                Some(stored) => {
                    let bytes = view.with_replaced(local, p.shape(), stored)?;
                    let header = ChunkHeader::parse(&bytes)?;
                    ((bytes.len() - header.header_len) as u64 <= max).then_some(bytes)
                }
                None => None,
            };
            match replaced {
                Some(bytes) => write_chunk(store, &node, tv, chunk, bytes)?,
                None => {
                    // Split the chunk's run around the new sample.
                    let mut packer = Packer::new(store, &node);
                    for i in 0..view.sample_count() {
                        if i != local {
                            packer.push(tv, &view.header().shape(i)?, &view.stored(i)?)?;
                            continue;
                        }
                        match &p.stored {
                            Some(stored) => packer.push(tv, p.shape(), stored)?,
                            None => {
                                let first = write_tiles(store, &node, tv, index, &p.array)?;
                                packer.push_tiled(tv, first)?;
                            }
                        }
                    }
                    let (runs, _) = packer.finish(tv)?;
                    tv.chunks.replace_range(run.start, run.end, &runs)?;
                }
            }
        }
        let tv = self.node.tensor_mut(tensor)?;
        tv.shapes.set(index, p.shape())?;
        tv.diff.updated.insert(index);
        Ok(())
    }

    pub fn rechunk(&mut self, store: &Store, tensor: &str) -> Result<RechunkStats> {
        self.unsaved = true;
        self.close(store, tensor)?;
        let node = self.node.id.clone();
        let tv = self.node.tensor(tensor)?;
        let before = tv.live_chunks().len();
        if tv.len() == 0 || is_optimal(tv) {
            return Ok(RechunkStats {
                chunks_before: before,
                chunks_after: before,
                bytes_moved: 0,
            });
        }
        let reader = self.reader(store, tensor)?;
        let mut next = tv.clone();
        let mut packer = Packer::new(store, &node);
        for (chunk, range) in tv.chunks.runs() {
            if tv.tiles.entries.contains_key(&range.start) {
                packer.push_tiled(&mut next, chunk)?;
                continue;
            }
            let view = reader.chunk(chunk)?;
            for local in 0..(range.end - range.start) as usize {
                packer.push(&mut next, &view.header().shape(local)?, &view.stored(local)?)?;
            }
        }
        let (runs, moved) = packer.finish(&mut next)?;
        let mut encoder = ChunkEncoder::new();
        for (id, n) in runs {
            encoder.append(id, n)?;
        }
        next.chunks = encoder;
        compact_chunk_table(&mut next)?;
        let after = next.live_chunks().len();
        *self.node.tensor_mut(tensor)? = next;
        Ok(RechunkStats {
            chunks_before: before,
            chunks_after: after,
            bytes_moved: moved,
        })
    }
}

/// Splits a sample into tiles, writes one chunk per tile and returns the first tile's chunk.
fn write_tiles(store: &Store, node: &str, tv: &mut TensorVersion, index: u64, array: &DynArray) -> Result<ChunkId> {
    let schema = tv.meta.schema.clone();
    let shape = array.shape().to_vec();
    let spatial = tiling::spatial_axes(&schema, shape.len());
    let budget = tv.meta.policy.max_bytes / 2;
    let tile = tiling::tile_shape(&shape, &spatial, schema.dtype.size(), budget).ok_or_else(|| {
        Error::ChunkWriteFailure {
            tensor: schema.name.clone(),
            reason: format!("no tile of shape {shape:?} fits in {budget} bytes"),
        }
    })?;
    let grid = tiling::grid_shape(&shape, &tile);
    let mut chunks = Vec::new();
    for cell in tiling::grid_cells(&grid) {
        let region = tiling::tile_region(&cell, &tile, &shape);
        let id = tv.new_chunk();
        let mut b = ChunkBuilder::new(schema.sample_compression);
        b.push(&array.slice_region(&region));
        write_chunk(store, node, tv, id, b.finish())?;
        chunks.push(id);
    }
    let first = chunks[0];
    tv.tiles.entries.insert(
        index,
        TileEntry {
            sample_shape: shape,
            tile_shape: tile,
            grid_shape: grid,
            chunks,
        },
    );
    Ok(first)
}

/// Contiguous groups of encoder rows not interrupted by tiled samples.
fn untiled_groups(tv: &TensorVersion) -> Vec<Vec<(ChunkId, Range<u64>)>> {
    let mut groups = vec![Vec::new()];
    for (chunk, range) in tv.chunks.runs() {
        if tv.tiles.entries.contains_key(&range.start) {
            groups.push(Vec::new());
        } else {
            groups.last_mut().unwrap().push((chunk, range));
        }
    }
    groups.retain(|g| !g.is_empty());
    groups
}

/// Non-tile chunks that a rechunk would change: stale bytes, samples not
/// matching their row, or an undersized chunk that could have taken the next
/// sample.
pub(crate) fn fragmented_chunks(tv: &TensorVersion) -> (usize, usize) {
    let policy = tv.meta.policy;
    let (mut bad, mut total) = (0, 0);
    for group in untiled_groups(tv) {
        for (i, (chunk, range)) in group.iter().enumerate() {
            total += 1;
            let stat = tv.stat(*chunk);
            let mut ok = stat.stale == 0 && stat.samples as u64 == range.end - range.start;
            if let Some((next, _)) = group.get(i + 1) {
                ok &= stat.payload >= policy.min_bytes || stat.payload + tv.stat(*next).first > policy.max_bytes;
            }
            bad += usize::from(!ok);
        }
    }
    (bad, total)
}

fn is_optimal(tv: &TensorVersion) -> bool {
    fragmented_chunks(tv).0 == 0
}

/// Drops unreferenced entries from the chunk-name table and renumbers ordinals.
fn compact_chunk_table(tv: &mut TensorVersion) -> Result<()> {
    let live = tv.live_chunks();
    let mut map = HashMap::with_capacity(live.len());
    let (mut names, mut stats) = (Vec::new(), Vec::new());
    for old in live {
        map.insert(old, ChunkId(names.len() as u64));
        names.push(tv.chunk_name(old).to_string());
        stats.push(tv.stat(old));
    }
    let rows = tv
        .chunks
        .rows()
        .iter()
        .map(|r| EncoderRow {
            last_index: r.last_index,
            chunk: map[&r.chunk],
        })
        .collect();
    tv.chunks = ChunkEncoder::from_rows(rows)?;
    for entry in tv.tiles.entries.values_mut() {
        for c in &mut entry.chunks {
            *c = map[c];
        }
    }
    tv.meta.chunk_names = names;
    tv.meta.chunk_stats = stats;
    Ok(())
}
