//! Binary chunk layout.
//!
//! ```text
//! "DLCH" | version u32 | sample_count u32
//!        | byte_table_len u32 | (start u64, end u64) * byte_table_len
//!        | shape_table_len u32 | (last_local u32, ndim u8, dim u64 * ndim) * shape_table_len
//!        | compression u8 | payload
//! ```
//!
//! All integers are little-endian. Byte ranges are relative to the start of
//! the payload. The shape table is run-length encoded over equal consecutive
//! shapes.

use bytes::Bytes;

use super::{ChunkPolicy, Compression, FormatError, HtypeSchema, Result};
use crate::array::DynArray;
use crate::scalar::Dtype;

pub const CHUNK_MAGIC: &[u8; 4] = b"DLCH";
pub const CHUNK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub last_local: u32,
    pub shape: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkHeader {
    pub format_version: u32,
    pub sample_count: u32,
    pub byte_table: Vec<(u64, u64)>,
    pub shape_table: Vec<ShapeRow>,
    pub compression: Compression,
    /// Offset of the payload within the chunk.
    pub header_len: usize,
}

/// Outcome of parsing a possibly truncated chunk prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeaderRead {
    Complete(ChunkHeader),
    /// The prefix ends inside the header; at least this many bytes are needed.
    NeedBytes(usize),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn corrupt(msg: impl Into<String>) -> FormatError {
    FormatError::CorruptHeader(msg.into())
}

impl ChunkHeader {
    /// Parses the header from the beginning of `bytes`.
    pub fn read(bytes: &[u8]) -> Result<HeaderRead> {
        let mut c = Cursor { bytes, pos: 0 };
        // Lower bound on what is still missing once the cursor runs dry.
        macro_rules! need {
            ($e:expr, $more:expr) => {
                match $e {
                    Some(v) => v,
                    None => return Ok(HeaderRead::NeedBytes(c.pos + $more)),
                }
            };
        }
        let magic = need!(c.take(4), 4);
        if magic != CHUNK_MAGIC {
            return Err(corrupt("bad chunk magic"));
        }
        let format_version = need!(c.u32(), 4);
        if format_version != CHUNK_FORMAT_VERSION {
            return Err(corrupt(format!("unsupported chunk version {format_version}")));
        }
        let sample_count = need!(c.u32(), 4);
        let table_len = need!(c.u32(), 4);
        if table_len != sample_count {
            return Err(corrupt("byte table length differs from sample count"));
        }
        let table_bytes = table_len as usize * 16;
        if bytes.len() < c.pos + table_bytes {
            return Ok(HeaderRead::NeedBytes(c.pos + table_bytes + 4));
        }
        let mut byte_table = Vec::with_capacity(table_len as usize);
        let mut prev_end = 0u64;
        for _ in 0..table_len {
            let start = c.u64().unwrap();
            let end = c.u64().unwrap();
            if start > end || start < prev_end {
                return Err(corrupt("byte ranges overlap or are not ascending"));
            }
            prev_end = end;
            byte_table.push((start, end));
        }
        let shape_len = need!(c.u32(), 4);
        let mut shape_table = Vec::with_capacity(shape_len as usize);
        for _ in 0..shape_len {
            let last_local = need!(c.u32(), 5);
            let ndim = need!(c.u8(), 1) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(need!(c.u64(), 8));
            }
            if let Some(prev) = shape_table.last() {
                let prev: &ShapeRow = prev;
                if last_local <= prev.last_local {
                    return Err(corrupt("shape table rows are not increasing"));
                }
            }
            shape_table.push(ShapeRow { last_local, shape });
        }
        match shape_table.last() {
            None if sample_count != 0 => return Err(corrupt("missing shape table")),
            Some(row) if row.last_local + 1 != sample_count => {
                return Err(corrupt("shape table does not cover every sample"))
            }
            _ => {}
        }
        let compression = Compression::from_tag(need!(c.u8(), 1))?;
        Ok(HeaderRead::Complete(ChunkHeader {
            format_version,
            sample_count,
            byte_table,
            shape_table,
            compression,
            header_len: c.pos,
        }))
    }

    /// Parses a header that must be complete.
    pub fn parse(bytes: &[u8]) -> Result<ChunkHeader> {
        match Self::read(bytes)? {
            HeaderRead::Complete(h) => Ok(h),
            HeaderRead::NeedBytes(_) => Err(corrupt("truncated header")),
        }
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count as usize
    }

    fn check_index(&self, local: usize) -> Result<()> {
        if local >= self.sample_count() {
            return Err(FormatError::IndexOutOfRange {
                index: local as u64,
                len: self.sample_count as u64,
            });
        }
        Ok(())
    }

    pub fn shape(&self, local: usize) -> Result<Vec<usize>> {
        self.check_index(local)?;
        let row = self
            .shape_table
            .partition_point(|r| (r.last_local as usize) < local);
        Ok(self.shape_table[row].shape.iter().map(|&d| d as usize).collect())
    }

    /// Absolute byte range of a stored sample within the chunk object.
    pub fn sample_range(&self, local: usize) -> Result<(u64, u64)> {
        self.check_index(local)?;
        let (s, e) = self.byte_table[local];
        let base = self.header_len as u64;
        Ok((base + s, base + e))
    }

    pub fn payload_len(&self) -> u64 {
        self.byte_table.last().map(|r| r.1).unwrap_or(0)
    }
}

/// Decodes stored sample bytes into an array.
pub(crate) fn decode_stored(
    compression: Compression,
    dtype: Dtype,
    shape: &[usize],
    stored: &[u8],
) -> Result<DynArray> {
    let raw = match compression {
        Compression::None => std::borrow::Cow::Borrowed(stored),
        c => std::borrow::Cow::Owned(c.decompress(stored)?),
    };
    DynArray::from_le_bytes(dtype, shape, &raw).map_err(|e| corrupt(e.to_string()))
}

/// A fully fetched chunk.
#[derive(Debug, Clone)]
pub struct ChunkView {
    header: ChunkHeader,
    bytes: Bytes,
}

impl ChunkView {
    pub fn new(bytes: Bytes) -> Result<Self> {
        let header = ChunkHeader::parse(&bytes)?;
        if (header.header_len as u64 + header.payload_len()) > bytes.len() as u64 {
            return Err(corrupt("truncated payload"));
        }
        Ok(ChunkView { header, bytes })
    }

    pub fn header(&self) -> &ChunkHeader {
        &self.header
    }

    pub fn bytes(&self) -> &Bytes {
        &self.bytes
    }

    pub fn sample_count(&self) -> usize {
        self.header.sample_count()
    }

    /// Payload size including slack left by in-place updates.
    pub fn payload_len(&self) -> u64 {
        self.bytes.len() as u64 - self.header.header_len as u64
    }

    /// Stored (possibly compressed) bytes of one sample.
    pub fn stored(&self, local: usize) -> Result<Bytes> {
        let (s, e) = self.header.sample_range(local)?;
        Ok(self.bytes.slice(s as usize..e as usize))
    }

    pub fn sample(&self, local: usize, dtype: Dtype) -> Result<DynArray> {
        let shape = self.header.shape(local)?;
        let stored = self.stored(local)?;
        decode_stored(self.header.compression, dtype, &shape, &stored)
    }

    /// Rewrites one sample. A replacement that fits in the old byte range is
    /// written in place (leaving slack); otherwise the chunk is re-laid out.
    pub fn with_replaced(&self, local: usize, shape: &[usize], stored: &[u8]) -> Result<Vec<u8>> {
        let (start, end) = self.header.byte_table.get(local).copied().ok_or(
            FormatError::IndexOutOfRange {
                index: local as u64,
                len: self.header.sample_count as u64,
            },
        )?;
        let mut builder = ChunkBuilder::new(self.header.compression);
        if stored.len() as u64 <= end - start {
            let mut payload = self.bytes[self.header.header_len..].to_vec();
            payload[start as usize..start as usize + stored.len()].copy_from_slice(stored);
            for i in 0..self.sample_count() {
                let shape_i = if i == local {
                    shape.to_vec()
                } else {
                    self.header.shape(i)?
                };
                let range = if i == local {
                    (start, start + stored.len() as u64)
                } else {
                    self.header.byte_table[i]
                };
                builder.shapes.push(shape_i.iter().map(|&d| d as u64).collect());
                builder.ranges.push(range);
            }
            builder.payload = payload;
            return Ok(builder.finish());
        }
        for i in 0..self.sample_count() {
            if i == local {
                builder.push_stored(shape, stored);
            } else {
                builder.push_stored(&self.header.shape(i)?, &self.stored(i)?);
            }
        }
        Ok(builder.finish())
    }
}

/// Incrementally assembles a chunk.
#[derive(Debug, Clone)]
pub struct ChunkBuilder {
    compression: Compression,
    shapes: Vec<Vec<u64>>,
    ranges: Vec<(u64, u64)>,
    payload: Vec<u8>,
}

impl ChunkBuilder {
    pub fn new(compression: Compression) -> Self {
        ChunkBuilder {
            compression,
            shapes: Vec::new(),
            ranges: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn compression(&self) -> Compression {
        self.compression
    }

    /// Compresses and appends one sample; returns its stored size.
    pub fn push(&mut self, sample: &DynArray) -> u64 {
        let raw = sample.to_le_bytes();
        self.push_raw(sample.shape(), &raw)
    }

    pub fn push_raw(&mut self, shape: &[usize], raw: &[u8]) -> u64 {
        match self.compression {
            Compression::None => self.push_stored(shape, raw),
            c => {
                let stored = c.compress(raw);
                self.push_stored(shape, &stored)
            }
        }
    }

    /// Appends bytes that are already in stored form.
    pub fn push_stored(&mut self, shape: &[usize], stored: &[u8]) -> u64 {
        let start = self.payload.len() as u64;
        self.payload.extend_from_slice(stored);
        self.ranges.push((start, self.payload.len() as u64));
        self.shapes.push(shape.iter().map(|&d| d as u64).collect());
        stored.len() as u64
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn payload_len(&self) -> u64 {
        self.payload.len() as u64
    }

    pub fn shapes(&self) -> impl Iterator<Item = &[u64]> {
        self.shapes.iter().map(Vec::as_slice)
    }

    /// Stored bytes of a sample pushed earlier.
    pub fn stored(&self, local: usize) -> Option<&[u8]> {
        let (s, e) = *self.ranges.get(local)?;
        Some(&self.payload[s as usize..e as usize])
    }

    pub fn finish(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload.len() + 32 + self.ranges.len() * 24);
        out.extend_from_slice(CHUNK_MAGIC);
        out.extend_from_slice(&CHUNK_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ranges.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.ranges.len() as u32).to_le_bytes());
        for (s, e) in &self.ranges {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&e.to_le_bytes());
        }
        let mut rows: Vec<(u32, &[u64])> = Vec::new();
        for (i, shape) in self.shapes.iter().enumerate() {
            match rows.last_mut() {
                Some(row) if row.1 == shape.as_slice() => row.0 = i as u32,
                _ => rows.push((i as u32, shape)),
            }
        }
        out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
        for (last, shape) in rows {
            out.extend_from_slice(&last.to_le_bytes());
            out.push(shape.len() as u8);
            for d in shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        out.push(self.compression.tag());
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Serializes `samples` into one chunk using the schema's compression.
pub fn encode_chunk(samples: &[DynArray], schema: &HtypeSchema, policy: &ChunkPolicy) -> Result<Vec<u8>> {
    let mut builder = ChunkBuilder::new(schema.sample_compression);
    for sample in samples {
        if sample.dtype() != schema.dtype {
            return Err(FormatError::DtypeMismatch {
                expected: schema.dtype,
                found: sample.dtype(),
            });
        }
        builder.push(sample);
        if builder.payload_len() > policy.max_bytes {
            return Err(FormatError::ChunkOverflow {
                size: builder.payload_len(),
                max: policy.max_bytes,
            });
        }
    }
    Ok(builder.finish())
}

/// Decodes one sample from a complete chunk object.
pub fn decode_sample(chunk: &[u8], local_index: usize, dtype: Dtype) -> Result<DynArray> {
    ChunkView::new(Bytes::copy_from_slice(chunk))?.sample(local_index, dtype)
}
