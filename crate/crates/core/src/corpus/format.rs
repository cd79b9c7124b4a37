//! Bit-exact RAP1 reader and writer. All integers are little-endian.
//!
//! ```text
//! 0..4   magic "RAP1"
//! 4      format version (1)
//! 5      kind (0 id_prompts, 1 vocabulary, 2 crops, 3 images)
//! 6..8   reserved, zero
//! 8..12  u32 dim
//! 12..20 u64 count
//! string table: u64 total_bytes, then count × (u16 len, UTF-8 bytes)
//! tag table:    u8 schema, then count fixed-width records
//!               schema 1: u8 pos, u64 prompt_row   (9 bytes)
//!               schema 2: u64 source_image, u32 source_class   (12 bytes)
//! payload:      count × dim f32, row-major
//! ```
//!
//! `total_bytes` counts the records that follow it, length prefixes included.
//! A missing part-of-speech is written as `0xFF`, a missing prompt row as
//! `u64::MAX`.

use std::path::Path;

use super::{CropTag, EmbeddingStore, PartOfSpeech, StoreError, StoreKind, Tags, VocabTag};
use crate::vecops::{normalize_rows, EmbeddingMatrix, UNIT_TOLERANCE};

pub const MAGIC: &[u8; 4] = b"RAP1";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;

const NO_POS: u8 = 0xFF;
const NO_ROW: u64 = u64::MAX;

/// A store read from disk, with the number of rows that had to be
/// re-normalized because their norm drifted past tolerance.
#[derive(Debug, Clone)]
pub struct LoadedStore {
    pub store: EmbeddingStore,
    pub renormalized_rows: usize,
}

pub fn encode_store(store: &EmbeddingStore) -> Result<Vec<u8>, StoreError> {
    store.check_shape()?;
    if let Some(row) = store.matrix.first_non_finite_row() {
        return Err(StoreError::NonFiniteValue(row));
    }
    let count = store.count();
    let dim = store.dim();
    let dim32 = u32::try_from(dim).map_err(|_| StoreError::BadHeader(format!("dim {dim}")))?;

    let mut label_bytes = 0u64;
    for (i, l) in store.labels.iter().enumerate() {
        if l.len() > u16::MAX as usize {
            return Err(StoreError::LabelTooLong(i));
        }
        label_bytes += 2 + l.len() as u64;
    }

    let mut out = Vec::with_capacity(HEADER_LEN + 9 + label_bytes as usize + count * (13 + 4 * dim));
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(store.kind.code());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());

    out.extend_from_slice(&label_bytes.to_le_bytes());
    for l in &store.labels {
        out.extend_from_slice(&(l.len() as u16).to_le_bytes());
        out.extend_from_slice(l.as_bytes());
    }

    out.push(store.tags.schema_id());
    match &store.tags {
        Tags::None => {}
        Tags::Vocab(tags) => {
            for t in tags {
                out.push(t.pos.map_or(NO_POS, PartOfSpeech::code));
                out.extend_from_slice(&t.prompt_row.unwrap_or(NO_ROW).to_le_bytes());
            }
        }
        Tags::Crops(tags) => {
            for t in tags {
                out.extend_from_slice(&t.source_image.to_le_bytes());
                out.extend_from_slice(&t.source_class.to_le_bytes());
            }
        }
    }

    for v in store.matrix.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(StoreError::TruncatedFile(section))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, section: &'static str) -> Result<u8, StoreError> {
        Ok(self.take(1, section)?[0])
    }

    fn u16(&mut self, section: &'static str) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses a RAP1 byte buffer. Rows are returned exactly as stored; see
/// [`load_store`] for the re-normalizing loader.
pub fn decode_store(bytes: &[u8]) -> Result<EmbeddingStore, StoreError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "header").map_err(|_| StoreError::BadMagic)? != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = c.u8("header")?;
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let kind_code = c.u8("header")?;
    let kind = StoreKind::from_code(kind_code).ok_or(StoreError::UnknownKind(kind_code))?;
    if c.take(2, "header")? != [0, 0] {
        return Err(StoreError::BadHeader("reserved bytes are not zero".into()));
    }
    let dim = c.u32("header")? as usize;
    if dim == 0 {
        return Err(StoreError::BadHeader("dim is zero".into()));
    }
    let count64 = c.u64("header")?;
    // Each row needs at least a 2-byte label prefix, so this bounds allocation.
    if count64 > (bytes.len() as u64) / 2 + 1 {
        return Err(StoreError::TruncatedFile("string table"));
    }
    let count = count64 as usize;

    let total = c.u64("string table")?;
    let start = c.pos;
    let mut labels = Vec::with_capacity(count);
    for row in 0..count {
        let len = c.u16("string table")? as usize;
        let raw = c.take(len, "string table")?;
        let s = std::str::from_utf8(raw).map_err(|_| StoreError::InvalidUtf8(row))?;
        labels.push(s.to_owned());
    }
    if (c.pos - start) as u64 != total {
        return Err(StoreError::BadHeader(format!(
            "string table declares {total} bytes, records occupy {}",
            c.pos - start
        )));
    }

    let schema = c.u8("tag table")?;
    let tags = match schema {
        0 => Tags::None,
        1 => {
            let mut v = Vec::with_capacity(count);
            for row in 0..count {
                let pos = match c.u8("tag table")? {
                    NO_POS => None,
                    code => Some(PartOfSpeech::from_code(code).ok_or(StoreError::BadTag(row))?),
                };
                let pr = c.u64("tag table")?;
                v.push(VocabTag { pos, prompt_row: (pr != NO_ROW).then_some(pr) });
            }
            Tags::Vocab(v)
        }
        2 => {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                let source_image = c.u64("tag table")?;
                let source_class = c.u32("tag table")?;
                v.push(CropTag { source_image, source_class });
            }
            Tags::Crops(v)
        }
        other => return Err(StoreError::UnknownTagSchema(other)),
    };
    if schema != kind.tag_schema() {
        return Err(StoreError::TagSchemaMismatch { kind, expected: kind.tag_schema(), found: schema });
    }

    let expected = count64
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::BadHeader("payload size overflows".into()))?;
    let found = c.remaining() as u64;
    if found < expected {
        return Err(StoreError::TruncatedFile("payload"));
    }
    if found > expected {
        return Err(StoreError::DimMismatch { expected, found });
    }
    let payload = c.take(expected as usize, "payload")?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let matrix = EmbeddingMatrix::new(dim, data)?;
    if let Some(row) = matrix.first_non_finite_row() {
        return Err(StoreError::NonFiniteValue(row));
    }
    Ok(EmbeddingStore { kind, matrix, labels, tags })
}

/// Reads and validates a store, re-normalizing rows whose norm deviates from
/// one by more than 1e-4.
pub fn load_store(path: &Path) -> Result<LoadedStore, StoreError> {
    let bytes = std::fs::read(path)
        .map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    let mut store = decode_store(&bytes)?;
    let drifted: Vec<usize> = (0..store.count())
        .filter(|&i| (store.matrix.row_norm(i) - 1.0).abs() > UNIT_TOLERANCE)
        .collect();
    if !drifted.is_empty() {
        log::warn!("{}: re-normalizing {} rows", path.display(), drifted.len());
        store.matrix = normalize_rows(&store.matrix).map_err(|e| match e {
            crate::vecops::VecError::ZeroRow(r) => StoreError::ZeroRow(r),
            other => other.into(),
        })?;
    }
    Ok(LoadedStore { store, renormalized_rows: drifted.len() })
}

pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<(), StoreError> {
    let bytes = encode_store(store)?;
    std::fs::write(path, bytes).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

/// Writes the free-form `.meta.json` sidecar next to a store.
pub fn save_meta(store_path: &Path, meta: &serde_json::Value) -> Result<(), StoreError> {
    let path = store_path.with_extension("meta.json");
    let text = serde_json::to_string_pretty(meta).expect("json values always serialize");
    std::fs::write(&path, text + "\n").map_err(|source| StoreError::Io { path, source })
}
