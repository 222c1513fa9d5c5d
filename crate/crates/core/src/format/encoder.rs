//! Run-length index maps from global sample index to chunk and shape.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{FormatError, Result};

pub const ENCODER_MAGIC: &[u8; 4] = b"DLEN";
pub const SHAPE_MAGIC: &[u8; 4] = b"DLSH";

/// Ordinal of a chunk in a tensor's chunk-name table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderRow {
    pub last_index: u64,
    pub chunk: ChunkId,
}

/// Maps every global sample index to the chunk holding it.
///
/// Rows are strictly increasing in `last_index`, and adjacent rows never share
/// a chunk. The local index of a sample is its distance from the first index
/// of its row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkEncoder {
    rows: Vec<EncoderRow>,
}

impl ChunkEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<EncoderRow>) -> Result<Self> {
        let enc = ChunkEncoder { rows };
        enc.check()?;
        Ok(enc)
    }

    pub fn rows(&self) -> &[EncoderRow] {
        &self.rows
    }

    pub fn num_samples(&self) -> u64 {
        self.rows.last().map(|r| r.last_index + 1).unwrap_or(0)
    }

    fn row_start(&self, row: usize) -> u64 {
        if row == 0 {
            0
        } else {
            self.rows[row - 1].last_index + 1
        }
    }

    /// Global index range covered by row `row`.
    pub fn row_range(&self, row: usize) -> Range<u64> {
        self.row_start(row)..self.rows[row].last_index + 1
    }

    /// `(chunk, global range)` for every row, in index order.
    pub fn runs(&self) -> impl Iterator<Item = (ChunkId, Range<u64>)> + '_ {
        (0..self.rows.len()).map(|i| (self.rows[i].chunk, self.row_range(i)))
    }

    fn row_of(&self, global: u64) -> Result<usize> {
        if global >= self.num_samples() {
            return Err(FormatError::IndexOutOfRange {
                index: global,
                len: self.num_samples(),
            });
        }
        Ok(self.rows.partition_point(|r| r.last_index < global))
    }

    /// Chunk and local index of a global sample index.
    pub fn lookup(&self, global: u64) -> Result<(ChunkId, u64)> {
        let row = self.row_of(global)?;
        Ok((self.rows[row].chunk, global - self.row_start(row)))
    }

    /// Global range of the row containing `global`.
    pub fn run_of(&self, global: u64) -> Result<(ChunkId, Range<u64>)> {
        let row = self.row_of(global)?;
        Ok((self.rows[row].chunk, self.row_range(row)))
    }

    /// Records `count` new samples stored in `chunk`.
    pub fn append(&mut self, chunk: ChunkId, count: u64) -> Result<()> {
        if count == 0 {
            return Err(FormatError::InvariantViolation("append of zero samples".into()));
        }
        let next = self.num_samples() + count - 1;
        match self.rows.last_mut() {
            Some(last) if last.chunk == chunk => last.last_index = next,
            _ => self.rows.push(EncoderRow {
                last_index: next,
                chunk,
            }),
        }
        Ok(())
    }

    /// Replaces the mapping of `[start, end)` with `replacement`, a list of
    /// `(chunk, count)` runs whose counts sum to `end - start`.
    pub fn replace_range(&mut self, start: u64, end: u64, replacement: &[(ChunkId, u64)]) -> Result<()> {
        if start >= end || end > self.num_samples() {
            return Err(FormatError::InvariantViolation(format!(
                "replace range {start}..{end} outside 0..{}",
                self.num_samples()
            )));
        }
        if replacement.iter().any(|&(_, n)| n == 0)
            || replacement.iter().map(|&(_, n)| n).sum::<u64>() != end - start
        {
            return Err(FormatError::InvariantViolation(
                "replacement must cover the range exactly with non-empty runs".into(),
            ));
        }
        let mut runs: Vec<(ChunkId, u64)> = Vec::with_capacity(self.rows.len() + replacement.len());
        for (chunk, range) in self.runs() {
            if range.end <= start || range.start >= end {
                runs.push((chunk, range.end - range.start));
                continue;
            }
            if range.start < start {
                runs.push((chunk, start - range.start));
            }
            if range.start <= start {
                runs.extend_from_slice(replacement);
            }
            if range.end > end {
                runs.push((chunk, range.end - end));
            }
        }
        let mut rebuilt = ChunkEncoder::new();
        for (chunk, n) in runs {
            rebuilt.append(chunk, n)?;
        }
        *self = rebuilt;
        Ok(())
    }

    /// Distinct chunks in index order.
    pub fn chunks(&self) -> Vec<ChunkId> {
        let mut seen = std::collections::HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.chunk))
            .map(|r| r.chunk)
            .collect()
    }

    fn check(&self) -> Result<()> {
        for pair in self.rows.windows(2) {
            if pair[1].last_index <= pair[0].last_index {
                return Err(FormatError::InvariantViolation("rows not increasing".into()));
            }
            if pair[1].chunk == pair[0].chunk {
                return Err(FormatError::InvariantViolation("adjacent rows share a chunk".into()));
            }
        }
        Ok(())
    }

    /// `"DLEN" | row_count u64 | (last_index u64, chunk_ordinal u64)*`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.rows.len() * 16);
        out.extend_from_slice(ENCODER_MAGIC);
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for r in &self.rows {
            out.extend_from_slice(&r.last_index.to_le_bytes());
            out.extend_from_slice(&r.chunk.0.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || FormatError::CorruptHeader("malformed chunk encoder".into());
        if bytes.len() < 12 || &bytes[..4] != ENCODER_MAGIC {
            return Err(bad());
        }
        let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + n * 16 {
            return Err(bad());
        }
        let rows = bytes[12..]
            .chunks_exact(16)
            .map(|c| EncoderRow {
                last_index: u64::from_le_bytes(c[..8].try_into().unwrap()),
                chunk: ChunkId(u64::from_le_bytes(c[8..].try_into().unwrap())),
            })
            .collect();
        Self::from_rows(rows).map_err(|_| bad())
    }
}

/// Run-length map from global sample index to sample shape.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShapeEncoder {
    rows: Vec<(u64, Vec<u64>)>,
}

impl ShapeEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[(u64, Vec<u64>)] {
        &self.rows
    }

    pub fn num_samples(&self) -> u64 {
        self.rows.last().map(|r| r.0 + 1).unwrap_or(0)
    }

    pub fn append(&mut self, shape: &[usize], count: u64) {
        if count == 0 {
            return;
        }
        let next = self.num_samples() + count - 1;
        let shape: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
        match self.rows.last_mut() {
            Some(last) if last.1 == shape => last.0 = next,
            _ => self.rows.push((next, shape)),
        }
    }

    pub fn shape(&self, global: u64) -> Result<Vec<usize>> {
        if global >= self.num_samples() {
            return Err(FormatError::IndexOutOfRange {
                index: global,
                len: self.num_samples(),
            });
        }
        let row = self.rows.partition_point(|r| r.0 < global);
        Ok(self.rows[row].1.iter().map(|&d| d as usize).collect())
    }

    /// Changes the shape recorded for one existing index.
    pub fn set(&mut self, global: u64, shape: &[usize]) -> Result<()> {
        let n = self.num_samples();
        if global >= n {
            return Err(FormatError::IndexOutOfRange { index: global, len: n });
        }
        let mut rebuilt = ShapeEncoder::new();
        let mut start = 0u64;
        for (last, s) in &self.rows {
            let s: Vec<usize> = s.iter().map(|&d| d as usize).collect();
            if global >= start && global <= *last {
                rebuilt.append(&s, global - start);
                rebuilt.append(shape, 1);
                rebuilt.append(&s, last - global);
            } else {
                rebuilt.append(&s, last - start + 1);
            }
            start = last + 1;
        }
        *self = rebuilt;
        Ok(())
    }

    /// `"DLSH" | row_count u64 | (last_index u64, ndim u8, dim u64 * ndim)*`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SHAPE_MAGIC);
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for (last, shape) in &self.rows {
            out.extend_from_slice(&last.to_le_bytes());
            out.push(shape.len() as u8);
            for d in shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || FormatError::CorruptHeader("malformed shape encoder".into());
        if bytes.len() < 12 || &bytes[..4] != SHAPE_MAGIC {
            return Err(bad());
        }
        let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let mut pos = 12;
        let read_u64 = |pos: &mut usize| -> Result<u64> {
            let s = bytes.get(*pos..*pos + 8).ok_or_else(bad)?;
            *pos += 8;
            Ok(u64::from_le_bytes(s.try_into().unwrap()))
        };
        let mut rows = Vec::new();
        for _ in 0..n {
            let last = read_u64(&mut pos)?;
            let ndim = *bytes.get(pos).ok_or_else(bad)? as usize;
            pos += 1;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut pos)?);
            }
            rows.push((last, shape));
        }
        if pos != bytes.len() {
            return Err(bad());
        }
        Ok(ShapeEncoder { rows })
    }
}
