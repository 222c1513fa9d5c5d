//! Fetch scheduling: which chunk objects to read, in what order, and which
//! byte ranges of each.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Snapshot;
use crate::error::Result;
use crate::format::{ChunkId, HtypeSchema};
use crate::storage::StorageKey;
use crate::view::DatasetView;

/// One row of the view as seen by the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Item {
    /// Position in the view.
    pub pos: usize,
    /// Row of the underlying dataset.
    pub row: u64,
    /// Index of the sample inside its primary-tensor chunk.
    pub local: u32,
    /// Decoded bytes of the primary sample.
    pub primary_bytes: u64,
    /// Decoded bytes of every streamed tensor of the row.
    pub row_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnitSource {
    /// Samples of one chunk of the primary tensor.
    Chunk {
        name: String,
        key: StorageKey,
        /// Coalesced runs of local sample indices.
        ranges: Vec<Range<u32>>,
        /// Fetch the whole object instead of the ranges.
        whole: bool,
        /// Payload bytes of the chunk object.
        payload: u64,
        samples: u32,
    },
    /// One sample split into tiles.
    Tiled,
    /// Rows that read no tensor data.
    Rows,
}

/// One unit of fetch work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchUnit {
    pub source: UnitSource,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchSchedule {
    /// Tensor whose chunks define the units; other tensors are read per row.
    pub primary: Option<String>,
    pub units: Vec<FetchUnit>,
}

fn header_estimate(samples: u32) -> u64 {
    64 + 16 * samples as u64
}

impl FetchUnit {
    /// Upper estimate of bytes transferred for the primary tensor.
    pub fn est_fetch(&self) -> u64 {
        match &self.source {
            UnitSource::Chunk {
                whole: true,
                payload,
                samples,
                ..
            } => payload + header_estimate(*samples),
            UnitSource::Chunk { samples, .. } => {
                header_estimate(*samples) + self.items.iter().map(|i| i.primary_bytes).sum::<u64>()
            }
            UnitSource::Tiled => self.items.iter().map(|i| i.primary_bytes).sum(),
            UnitSource::Rows => 0,
        }
    }

    pub fn est_decoded(&self) -> u64 {
        self.items.iter().map(|i| i.row_bytes).sum()
    }

    /// Bytes to reserve before fetching: raw and decoded data coexist while decoding.
    pub fn estimate(&self) -> u64 {
        self.est_fetch() + self.est_decoded()
    }
}

/// Merges sorted local indices into half-open runs.
pub fn coalesce(locals: impl IntoIterator<Item = u32>) -> Vec<Range<u32>> {
    let mut sorted: Vec<u32> = locals.into_iter().collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out: Vec<Range<u32>> = Vec::new();
    for l in sorted {
        match out.last_mut() {
            Some(r) if r.end == l => r.end = l + 1,
            _ => out.push(l..l + 1),
        }
    }
    out
}

fn decoded_bytes(snap: &Snapshot, schema: &HtypeSchema, row: u64) -> Result<u64> {
    let shape = snap.shape(&schema.name, row)?;
    Ok(shape.iter().product::<usize>() as u64 * schema.dtype.size() as u64)
}

struct ChunkInfo {
    name: String,
    key: StorageKey,
    payload: u64,
    samples: u32,
}

fn chunk_unit(info: &ChunkInfo, items: Vec<Item>) -> FetchUnit {
    let ranges = coalesce(items.iter().map(|i| i.local));
    let covered: u64 = ranges.iter().map(|r| (r.end - r.start) as u64).sum();
    FetchUnit {
        source: UnitSource::Chunk {
            name: info.name.clone(),
            key: info.key.clone(),
            ranges,
            whole: covered * 2 >= info.samples as u64,
            payload: info.payload,
            samples: info.samples,
        },
        items,
    }
}

/// Orders the fetch work for one epoch over `tensors` of `view`.
///
/// Without shuffling and with `ordered` delivery, units are maximal runs of
/// consecutive view positions inside one chunk, so delivery never waits on a
/// later unit. Otherwise every chunk is one unit; units are visited by first
/// view position, or in a seeded random order when shuffling.
pub fn plan_fetch_order(
    view: &DatasetView,
    tensors: &[String],
    shuffle: bool,
    seed: u64,
    ordered: bool,
) -> Result<FetchSchedule> {
    let snap = view.snapshot();
    let mut schemas = Vec::with_capacity(tensors.len());
    for t in tensors {
        schemas.push(snap.schema(t)?.clone());
    }
    let rows = view.row_order();
    let mut row_bytes = vec![0u64; rows.len()];
    let mut per_tensor = vec![0u64; schemas.len()];
    let mut primary_bytes: Vec<Vec<u64>> = Vec::with_capacity(schemas.len());
    for (k, s) in schemas.iter().enumerate() {
        let mut col = Vec::with_capacity(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            let b = decoded_bytes(snap, s, r)?;
            row_bytes[i] += b;
            per_tensor[k] += b;
            col.push(b);
        }
        primary_bytes.push(col);
    }
    let primary = per_tensor
        .iter()
        .enumerate()
        .max_by_key(|&(k, &b)| (b, std::cmp::Reverse(k)))
        .map(|(k, _)| k);
    let Some(p) = primary else {
        let units = (0..rows.len())
            .collect::<Vec<_>>()
            .chunks(256)
            .map(|c| FetchUnit {
                source: UnitSource::Rows,
                items: c
                    .iter()
                    .map(|&pos| Item {
                        pos,
                        row: rows[pos],
                        local: 0,
                        primary_bytes: 0,
                        row_bytes: 0,
                    })
                    .collect(),
            })
            .collect();
        return Ok(FetchSchedule { primary: None, units });
    };
    let tensor = &schemas[p].name;
    let tv = snap.tensor_version(tensor)?;
    let reader = snap.reader(tensor)?;
    let mut infos: BTreeMap<ChunkId, ChunkInfo> = BTreeMap::new();
    // (chunk or None for tiled, item) in view order.
    let mut located: Vec<(Option<ChunkId>, Item)> = Vec::with_capacity(rows.len());
    for (pos, &row) in rows.iter().enumerate() {
        let mut item = Item {
            pos,
            row,
            local: 0,
            primary_bytes: primary_bytes[p][pos],
            row_bytes: row_bytes[pos],
        };
        if tv.tiles.entries.contains_key(&row) {
            located.push((None, item));
            continue;
        }
        let (id, local) = tv.chunks.lookup(row)?;
        item.local = local as u32;
        if let std::collections::btree_map::Entry::Vacant(e) = infos.entry(id) {
            let stat = tv.stat(id);
            e.insert(ChunkInfo {
                name: tv.chunk_name(id).to_string(),
                key: reader.chunk_key(id)?,
                payload: stat.payload,
                samples: stat.samples,
            });
        }
        located.push((Some(id), item));
    }
    let mut units = Vec::new();
    if ordered && !shuffle {
        let mut run: Vec<Item> = Vec::new();
        let mut run_chunk: Option<ChunkId> = None;
        for (chunk, item) in located {
            if chunk.is_none() || chunk != run_chunk {
                if let Some(id) = run_chunk.take() {
                    units.push(chunk_unit(&infos[&id], std::mem::take(&mut run)));
                }
            }
            match chunk {
                None => units.push(FetchUnit {
                    source: UnitSource::Tiled,
                    items: vec![item],
                }),
                Some(id) => {
                    run_chunk = Some(id);
                    run.push(item);
                }
            }
        }
        if let Some(id) = run_chunk {
            units.push(chunk_unit(&infos[&id], run));
        }
    } else {
        let mut groups: indexmap::IndexMap<ChunkId, Vec<Item>> = indexmap::IndexMap::new();
        let mut firsts: Vec<(usize, FetchUnit)> = Vec::new();
        for (chunk, item) in located {
            match chunk {
                None => firsts.push((
                    item.pos,
                    FetchUnit {
                        source: UnitSource::Tiled,
                        items: vec![item],
                    },
                )),
                Some(id) => groups.entry(id).or_default().push(item),
            }
        }
        for (id, items) in groups {
            firsts.push((items[0].pos, chunk_unit(&infos[&id], items)));
        }
        firsts.sort_by_key(|(first, _)| *first);
        units = firsts.into_iter().map(|(_, u)| u).collect();
        if shuffle {
            units.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
    }
    Ok(FetchSchedule {
        primary: Some(tensor.clone()),
        units,
    })
}

/// Splits units whose reservation would exceed `max_bytes` into smaller units.
pub fn split_units(units: Vec<FetchUnit>, max_bytes: u64) -> Vec<FetchUnit> {
    let mut out = Vec::with_capacity(units.len());
    for u in units {
        if u.items.len() <= 1 || u.estimate() <= max_bytes {
            out.push(u);
            continue;
        }
        match &u.source {
            UnitSource::Chunk {
                name,
                key,
                payload,
                samples,
                ..
            } => {
                let info = ChunkInfo {
                    name: name.clone(),
                    key: key.clone(),
                    payload: *payload,
                    samples: *samples,
                };
                // A piece covering most of the chunk may still exceed the
                // bound in whole mode; ranged mode costs at most its items.
                let finish = |items: Vec<Item>| {
                    let mut unit = chunk_unit(&info, items);
                    if unit.estimate() > max_bytes {
                        if let UnitSource::Chunk { whole, .. } = &mut unit.source {
                            *whole = false;
                        }
                    }
                    unit
                };
                let mut piece: Vec<Item> = Vec::new();
                let mut acc = header_estimate(*samples);
                for item in u.items {
                    let cost = item.primary_bytes + item.row_bytes;
                    if !piece.is_empty() && acc + cost > max_bytes {
                        out.push(finish(std::mem::take(&mut piece)));
                        acc = header_estimate(*samples);
                    }
                    acc += cost;
                    piece.push(item);
                }
                if !piece.is_empty() {
                    out.push(finish(piece));
                }
            }
            _ => out.push(u),
        }
    }
    out
}
