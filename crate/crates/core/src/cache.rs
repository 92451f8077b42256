//! Persistent store of frozen caption embeddings.
//!
//! Training never calls a text encoder: every caption is embedded once,
//! offline, and the vectors are written here. The file is immutable once
//! built and is memory-mapped for reading, so any number of readers can
//! share one cache without coordination.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4    magic "LFTC"
//! 4..8    format version (u32, = 1)
//! 8..16   record count (u64)
//! 16..20  dim (u32)
//! 20      dtype code (0 = float32, 1 = bfloat16)
//! 21      normalized flag (0/1)
//! 22..32  reserved, zero
//! 32..    record_count x (id u64, absolute byte offset u64), ascending by id
//! ..      payload: one vector per table entry, in table order
//! ```

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use ndarray::Array2;

use crate::error::{LiftError, Result};

pub const MAGIC: &[u8; 4] = b"LFTC";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
const TABLE_ENTRY_LEN: usize = 16;

/// Scalar encoding of stored vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Bfloat16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Float32 => 0,
            DType::Bfloat16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::Float32),
            1 => Some(DType::Bfloat16),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Bfloat16 => 2,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = LiftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float32" | "f32" => Ok(DType::Float32),
            "bfloat16" | "bf16" => Ok(DType::Bfloat16),
            other => Err(LiftError::Config(format!("unknown dtype {other:?}"))),
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::Float32 => f.write_str("float32"),
            DType::Bfloat16 => f.write_str("bfloat16"),
        }
    }
}

/// Encodes to bfloat16 by dropping the low 16 bits of the float32 encoding.
#[inline]
pub fn bf16_encode(x: f32) -> u16 {
    (x.to_bits() >> 16) as u16
}

#[inline]
pub fn bf16_decode(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheHeader {
    pub format_version: u32,
    pub record_count: u64,
    pub dim: u32,
    pub dtype: DType,
    pub normalized: bool,
}

impl CacheHeader {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[0..4].copy_from_slice(MAGIC);
        buf[4..8].copy_from_slice(&self.format_version.to_le_bytes());
        buf[8..16].copy_from_slice(&self.record_count.to_le_bytes());
        buf[16..20].copy_from_slice(&self.dim.to_le_bytes());
        buf[20] = self.dtype.code();
        buf[21] = self.normalized as u8;
        buf
    }

    fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!(
                "file is {} bytes, shorter than the header",
                bytes.len()
            ));
        }
        if &bytes[0..4] != MAGIC {
            return Err(format!("bad magic {:?}", &bytes[0..4]));
        }
        let format_version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if format_version != FORMAT_VERSION {
            return Err(format!("unsupported format version {format_version}"));
        }
        let record_count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        if dim == 0 {
            return Err("dim is zero".into());
        }
        let dtype = DType::from_code(bytes[20])
            .ok_or_else(|| format!("unknown dtype code {}", bytes[20]))?;
        let normalized = match bytes[21] {
            0 => false,
            1 => true,
            other => return Err(format!("invalid normalized flag {other}")),
        };
        if bytes[22..32].iter().any(|&b| b != 0) {
            return Err("reserved header bytes are not zero".into());
        }
        Ok(CacheHeader {
            format_version,
            record_count,
            dim,
            dtype,
            normalized,
        })
    }

    pub fn vector_bytes(&self) -> usize {
        self.dim as usize * self.dtype.width()
    }

    fn payload_start(&self) -> usize {
        HEADER_LEN + self.record_count as usize * TABLE_ENTRY_LEN
    }

    fn expected_file_len(&self) -> Option<u64> {
        let table = self.record_count.checked_mul(TABLE_ENTRY_LEN as u64)?;
        let payload = self.record_count.checked_mul(self.vector_bytes() as u64)?;
        (HEADER_LEN as u64).checked_add(table)?.checked_add(payload)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(id: u64, vector: Vec<f32>) -> Self {
        Self { id, vector }
    }
}

/// Options for [`build_cache`].
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub dim: usize,
    pub dtype: DType,
    pub normalize: bool,
}

impl BuildOptions {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            dtype: DType::Float32,
            normalize: false,
        }
    }

    pub fn dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }
}

/// The values a cache built with `opts` returns for `vector`: optional
/// normalization in `f64`, then rounding to the storage dtype.
pub fn stored_form(vector: &[f32], opts: &BuildOptions) -> Result<Vec<f32>> {
    let mut v = vector.to_vec();
    if opts.normalize {
        let norm = vector
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(LiftError::Degenerate(
                "zero vector cannot be normalized".into(),
            ));
        }
        for (dst, &x) in v.iter_mut().zip(vector) {
            *dst = (x as f64 / norm) as f32;
        }
    }
    if opts.dtype == DType::Bfloat16 {
        v.iter_mut().for_each(|x| *x = bf16_decode(bf16_encode(*x)));
    }
    Ok(v)
}

/// Removes the wrapped path on drop unless disarmed.
struct RemoveOnDrop {
    path: PathBuf,
    armed: bool,
}

impl Drop for RemoveOnDrop {
    fn drop(&mut self) {
        if self.armed {
            let _ = fs::remove_file(&self.path);
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn encode_vector(out: &mut Vec<u8>, v: &[f32], dtype: DType) {
    match dtype {
        DType::Float32 => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        DType::Bfloat16 => {
            for x in v {
                out.extend_from_slice(&bf16_encode(*x).to_le_bytes());
            }
        }
    }
}

fn decode_vector(bytes: &[u8], dtype: DType, out: &mut [f32]) {
    match dtype {
        DType::Float32 => {
            for (dst, chunk) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        DType::Bfloat16 => {
            for (dst, chunk) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                *dst = bf16_decode(u16::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
}

/// Builds a cache file at `path` from a stream of records.
///
/// Vectors are spilled to a sibling file in arrival order and then copied
/// into id order, so memory use stays proportional to the id table rather
/// than the payload. The final file is written under a temporary name and
/// renamed into place; on any error no partial file is left behind.
pub fn build_cache<I>(
    path: impl AsRef<Path>,
    records: I,
    opts: BuildOptions,
) -> Result<EmbeddingCache>
where
    I: IntoIterator<Item = EmbeddingRecord>,
{
    try_build_cache(path, records.into_iter().map(Ok), opts)
}

/// [`build_cache`] over a fallible stream; the first error aborts the build
/// and leaves nothing at `path`.
pub fn try_build_cache<I>(
    path: impl AsRef<Path>,
    records: I,
    opts: BuildOptions,
) -> Result<EmbeddingCache>
where
    I: IntoIterator<Item = Result<EmbeddingRecord>>,
{
    let path = path.as_ref();
    if opts.dim == 0 || opts.dim > u32::MAX as usize {
        return Err(LiftError::Config(format!("invalid cache dim {}", opts.dim)));
    }
    let dim = opts.dim;
    let width = dim * opts.dtype.width();

    let spill_path = sibling(path, ".spill");
    let tmp_path = sibling(path, ".tmp");
    let _spill_guard = RemoveOnDrop {
        path: spill_path.clone(),
        armed: true,
    };
    let mut tmp_guard = RemoveOnDrop {
        path: tmp_path.clone(),
        armed: true,
    };

    let spill_file = File::create(&spill_path).map_err(|e| LiftError::io(&spill_path, e))?;
    let mut spill = BufWriter::with_capacity(1 << 20, spill_file);
    let mut order: Vec<(u64, u64)> = Vec::new();
    let mut seen = HashSet::new();
    let mut scratch = Vec::with_capacity(width);
    let mut normed = vec![0f32; dim];

    for record in records {
        let record = record?;
        if record.vector.len() != dim {
            return Err(LiftError::DimensionMismatch {
                id: record.id,
                expected: dim,
                actual: record.vector.len(),
            });
        }
        if !record.vector.iter().all(|x| x.is_finite()) {
            return Err(LiftError::NonFiniteVector(record.id));
        }
        if !seen.insert(record.id) {
            return Err(LiftError::DuplicateId(record.id));
        }
        let stored: &[f32] = if opts.normalize {
            let norm = record
                .vector
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(LiftError::Degenerate(format!(
                    "zero vector for id {} cannot be normalized",
                    record.id
                )));
            }
            for (dst, &x) in normed.iter_mut().zip(&record.vector) {
                *dst = (x as f64 / norm) as f32;
            }
            &normed
        } else {
            &record.vector
        };
        scratch.clear();
        encode_vector(&mut scratch, stored, opts.dtype);
        spill
            .write_all(&scratch)
            .map_err(|e| LiftError::io(&spill_path, e))?;
        order.push((record.id, order.len() as u64));
    }
    drop(seen);
    spill.flush().map_err(|e| LiftError::io(&spill_path, e))?;
    drop(spill);

    order.sort_unstable_by_key(|&(id, _)| id);
    let header = CacheHeader {
        format_version: FORMAT_VERSION,
        record_count: order.len() as u64,
        dim: dim as u32,
        dtype: opts.dtype,
        normalized: opts.normalize,
    };

    let spill_map = if order.is_empty() {
        None
    } else {
        let f = File::open(&spill_path).map_err(|e| LiftError::io(&spill_path, e))?;
        // SAFETY: the spill file is private to this call and not modified while mapped.
        Some(unsafe { Mmap::map(&f) }.map_err(|e| LiftError::io(&spill_path, e))?)
    };

    let out_file = File::create(&tmp_path).map_err(|e| LiftError::io(&tmp_path, e))?;
    let mut out = BufWriter::with_capacity(1 << 20, out_file);
    let io = |e| LiftError::io(&tmp_path, e);
    out.write_all(&header.encode()).map_err(io)?;
    let payload_start = header.payload_start() as u64;
    for (rank, &(id, _)) in order.iter().enumerate() {
        out.write_all(&id.to_le_bytes()).map_err(io)?;
        let offset = payload_start + (rank * width) as u64;
        out.write_all(&offset.to_le_bytes()).map_err(io)?;
    }
    if let Some(map) = &spill_map {
        for &(_, arrival) in &order {
            let start = arrival as usize * width;
            out.write_all(&map[start..start + width]).map_err(io)?;
        }
    }
    let file = out
        .into_inner()
        .map_err(|e| LiftError::io(&tmp_path, e.into_error()))?;
    file.sync_all().map_err(io)?;
    drop(file);
    drop(spill_map);

    fs::rename(&tmp_path, path).map_err(|e| LiftError::io(path, e))?;
    tmp_guard.armed = false;
    EmbeddingCache::open(path)
}

/// A read-only, memory-mapped embedding cache.
///
/// Lookups binary-search the on-disk id table, so opening is O(n) for
/// validation and each lookup is O(log n).
pub struct EmbeddingCache {
    path: PathBuf,
    header: CacheHeader,
    map: Option<Mmap>,
}

impl std::fmt::Debug for EmbeddingCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingCache")
            .field("path", &self.path)
            .field("header", &self.header)
            .finish()
    }
}

impl EmbeddingCache {
    /// Opens and structurally validates a cache file.
    ///
    /// Rejects bad magic, unknown versions, truncated or oversized files,
    /// unsorted or duplicated ids and offsets that do not follow the layout.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| LiftError::io(&path, e))?;
        let len = file.metadata().map_err(|e| LiftError::io(&path, e))?.len();
        let corrupt = |reason: String| LiftError::CorruptCache {
            path: path.clone(),
            reason,
        };
        if len < HEADER_LEN as u64 {
            return Err(corrupt(format!(
                "file is {len} bytes, shorter than the header"
            )));
        }
        // SAFETY: cache files are immutable after build.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| LiftError::io(&path, e))?;
        let header = CacheHeader::decode(&map).map_err(corrupt)?;
        let expected = header
            .expected_file_len()
            .ok_or_else(|| corrupt("record count overflows".into()))?;
        if expected != len {
            return Err(corrupt(format!("expected {expected} bytes, found {len}")));
        }
        let cache = EmbeddingCache {
            path: path.clone(),
            header,
            map: Some(map),
        };
        let payload_start = header.payload_start() as u64;
        let width = header.vector_bytes() as u64;
        let mut prev: Option<u64> = None;
        for rank in 0..header.record_count as usize {
            let (id, offset) = cache.table_entry(rank);
            if let Some(p) = prev {
                if id <= p {
                    return Err(corrupt(format!(
                        "id table not strictly ascending at entry {rank}"
                    )));
                }
            }
            if offset != payload_start + rank as u64 * width {
                return Err(corrupt(format!("entry {rank} has offset {offset}")));
            }
            prev = Some(id);
        }
        Ok(cache)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn len(&self) -> usize {
        self.header.record_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bytes(&self) -> &[u8] {
        self.map.as_deref().unwrap_or(&[])
    }

    fn table_entry(&self, rank: usize) -> (u64, u64) {
        let start = HEADER_LEN + rank * TABLE_ENTRY_LEN;
        let b = &self.bytes()[start..start + TABLE_ENTRY_LEN];
        (
            u64::from_le_bytes(b[0..8].try_into().unwrap()),
            u64::from_le_bytes(b[8..16].try_into().unwrap()),
        )
    }

    fn find(&self, id: u64) -> Option<usize> {
        let (mut lo, mut hi) = (0usize, self.len());
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let (mid_id, _) = self.table_entry(mid);
            match mid_id.cmp(&id) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(mid),
            }
        }
        None
    }

    fn decode_at(&self, rank: usize, out: &mut [f32]) {
        let (_, offset) = self.table_entry(rank);
        let start = offset as usize;
        let bytes = &self.bytes()[start..start + self.header.vector_bytes()];
        decode_vector(bytes, self.header.dtype, out);
    }

    pub fn contains(&self, id: u64) -> bool {
        self.find(id).is_some()
    }

    pub fn lookup(&self, id: u64) -> Result<Vec<f32>> {
        let rank = self.find(id).ok_or(LiftError::NotFound(id))?;
        let mut v = vec![0f32; self.dim()];
        self.decode_at(rank, &mut v);
        Ok(v)
    }

    /// Gathers the vectors for `ids` as rows of a matrix, preserving order.
    ///
    /// Every missing id is reported, not only the first.
    pub fn batch_gather(&self, ids: &[u64]) -> Result<Array2<f32>> {
        let ranks: Vec<Option<usize>> = ids.iter().map(|&id| self.find(id)).collect();
        let missing: Vec<u64> = ids
            .iter()
            .zip(&ranks)
            .filter(|(_, r)| r.is_none())
            .map(|(&id, _)| id)
            .collect();
        if !missing.is_empty() {
            return Err(LiftError::NotFoundMany(missing));
        }
        let mut out = Array2::<f32>::zeros((ids.len(), self.dim()));
        for (mut row, rank) in out.rows_mut().into_iter().zip(ranks) {
            self.decode_at(rank.unwrap(), row.as_slice_mut().unwrap());
        }
        Ok(out)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.len()).map(move |r| self.table_entry(r).0)
    }

    /// Visits every record once, in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = EmbeddingRecord> + '_ {
        (0..self.len()).map(move |rank| {
            let mut v = vec![0f32; self.dim()];
            self.decode_at(rank, &mut v);
            EmbeddingRecord::new(self.table_entry(rank).0, v)
        })
    }

    /// Full content check: every component finite and, for normalized
    /// caches, every vector within 1e-3 of unit norm.
    pub fn validate(&self) -> Result<()> {
        let mut v = vec![0f32; self.dim()];
        for rank in 0..self.len() {
            self.decode_at(rank, &mut v);
            let id = self.table_entry(rank).0;
            if !v.iter().all(|x| x.is_finite()) {
                return Err(LiftError::NonFiniteVector(id));
            }
            if self.header.normalized {
                let norm = v
                    .iter()
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    .sqrt();
                if (norm - 1.0).abs() > 1e-3 {
                    return Err(LiftError::CorruptCache {
                        path: self.path.clone(),
                        reason: format!("id {id} has norm {norm} in a normalized cache"),
                    });
                }
            }
        }
        Ok(())
    }
}
