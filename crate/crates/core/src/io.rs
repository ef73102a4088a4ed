//! Bit-exact persistence: PEMB embedding files, JSON-lines manifests and
//! reference indices, and the prototype bank container.
//!
//! PEMB layout: `"PEMB" | version u32 LE | rows u32 | dims u32 | payload
//! (rows*dims f32 LE, row-major) | crc32(payload)`. Writers go through a temp
//! file plus atomic rename; nothing is mutated in place.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::EmbeddingMatrix;

pub const PEMB_MAGIC: [u8; 4] = *b"PEMB";
pub const BANK_MAGIC: [u8; 4] = *b"PBNK";
pub const FORMAT_VERSION: u32 = 1;

/// Hard cap on references per category.
pub const MAX_REFS_PER_CATEGORY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

/// One category row of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u32,
    pub name: String,
    pub split: Split,
    pub has_description: bool,
}

/// One reference entry: a row of the reference embedding file plus its
/// resolution key and exemplar flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub row: usize,
    pub resolution: u32,
    pub exemplar: bool,
}

/// Per-category ordered reference collection. Entry 0 is the exemplar when
/// one exists; the rest are sorted by resolution descending.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub category_id: u32,
    pub entries: Vec<ReferenceEntry>,
}

impl ReferenceSet {
    /// Validate and canonicalize ordering. Returns how many reordering fixes
    /// were applied (0 when the input already satisfied the invariants).
    pub fn canonicalize(category_id: u32, mut entries: Vec<ReferenceEntry>) -> Result<(Self, u32)> {
        if entries.is_empty() {
            return Err(Error::EmptyReferenceSet(category_id));
        }
        if entries.len() > MAX_REFS_PER_CATEGORY {
            return Err(Error::OutOfRange(entries.len()));
        }
        let mut warnings = 0;
        let n_exemplars = entries.iter().filter(|e| e.exemplar).count();
        if n_exemplars > 1 {
            return Err(Error::Malformed {
                path: String::new(),
                line: 0,
                msg: format!("category {category_id} has {n_exemplars} exemplars"),
            });
        }
        if n_exemplars == 1 && !entries[0].exemplar {
            let pos = entries.iter().position(|e| e.exemplar).unwrap();
            let ex = entries.remove(pos);
            entries.insert(0, ex);
            warnings += 1;
        }
        let tail_start = usize::from(n_exemplars == 1);
        let tail = &mut entries[tail_start..];
        if tail.windows(2).any(|w| w[0].resolution < w[1].resolution) {
            tail.sort_by(|a, b| b.resolution.cmp(&a.resolution).then(a.row.cmp(&b.row)));
            warnings += 1;
        }
        Ok((
            Self {
                category_id,
                entries,
            },
            warnings,
        ))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = BufWriter::new(File::create(&tmp).map_err(|e| io_err(&tmp, e))?);
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.flush().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn matrix_payload(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut payload = Vec::with_capacity(m.data().len() * 4);
    for v in m.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    payload
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let payload = matrix_payload(m);
    let mut bytes = Vec::with_capacity(16 + payload.len() + 4);
    bytes.extend_from_slice(&PEMB_MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.dims() as u32).to_le_bytes());
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    write_atomic(path, &bytes)
}

fn take<'a>(buf: &'a [u8], off: &mut usize, n: usize, total: usize) -> Result<&'a [u8]> {
    if *off + n > buf.len() {
        return Err(Error::TruncatedPayload {
            expected: total,
            found: buf.len(),
        });
    }
    let s = &buf[*off..*off + n];
    *off += n;
    Ok(s)
}

fn read_u32(buf: &[u8], off: &mut usize, total: usize) -> Result<u32> {
    let s = take(buf, off, 4, total)?;
    Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

/// Decode matrix payload bytes, rejecting NaN/Inf.
fn decode_payload(payload: &[u8], rows: usize, dims: usize) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(rows * dims);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::NonFiniteValue(i));
        }
        data.push(v);
    }
    // from_vec re-checks length; finiteness already handled above
    EmbeddingMatrix::from_vec(rows, dims, data)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut off = 0;
    let magic = take(&buf, &mut off, 4, 16)?;
    if magic != PEMB_MAGIC {
        return Err(Error::BadMagic {
            expected: PEMB_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = read_u32(&buf, &mut off, 16)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let rows = read_u32(&buf, &mut off, 16)? as usize;
    let dims = read_u32(&buf, &mut off, 16)? as usize;
    let expected = 16 + rows * dims * 4 + 4;
    let payload = take(&buf, &mut off, rows * dims * 4, expected)?;
    let stored = read_u32(&buf, &mut off, expected)?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    decode_payload(payload, rows, dims)
}

#[derive(Deserialize)]
struct ManifestLine {
    id: u32,
    name: String,
    split: Split,
    has_description: bool,
}

/// Read a JSON-lines category manifest. Ids must be unique and contiguous
/// from 0; records are returned in id order.
pub fn read_manifest(path: &Path) -> Result<Vec<CategoryRecord>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut records: Vec<CategoryRecord> = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        records.push(CategoryRecord {
            id: rec.id,
            name: rec.name,
            split: rec.split,
            has_description: rec.has_description,
        });
    }
    records.sort_by_key(|r| r.id);
    for (i, r) in records.iter().enumerate() {
        if (r.id as usize) < i {
            return Err(Error::DuplicateCategoryId(r.id));
        }
        if r.id as usize > i {
            return Err(Error::NonContiguousCategoryIds(i as u32));
        }
    }
    Ok(records)
}

pub fn write_manifest(records: &[CategoryRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("manifest serializes");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

#[derive(Serialize, Deserialize)]
struct RefLine {
    id: u32,
    row: usize,
    resolution: u32,
    exemplar: bool,
}

/// Read a JSON-lines reference index against its embedding file. Returns the
/// per-category sets plus a count of ordering fixes applied.
pub fn read_reference_index(
    path: &Path,
    embeddings: &EmbeddingMatrix,
) -> Result<(std::collections::BTreeMap<u32, ReferenceSet>, u32)> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut grouped: std::collections::BTreeMap<u32, Vec<ReferenceEntry>> = Default::default();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RefLine = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if rec.row >= embeddings.rows() {
            return Err(Error::RowIndexOutOfRange {
                row: rec.row,
                rows: embeddings.rows(),
            });
        }
        grouped.entry(rec.id).or_default().push(ReferenceEntry {
            row: rec.row,
            resolution: rec.resolution,
            exemplar: rec.exemplar,
        });
    }
    let mut warnings = 0;
    let mut sets = std::collections::BTreeMap::new();
    for (id, entries) in grouped {
        let (set, w) = ReferenceSet::canonicalize(id, entries)?;
        warnings += w;
        sets.insert(id, set);
    }
    Ok((sets, warnings))
}

pub fn write_reference_index(
    sets: &std::collections::BTreeMap<u32, ReferenceSet>,
    path: &Path,
) -> Result<()> {
    let mut out = Vec::new();
    for set in sets.values() {
        for e in &set.entries {
            let line = RefLine {
                id: set.category_id,
                row: e.row,
                resolution: e.resolution,
                exemplar: e.exemplar,
            };
            serde_json::to_writer(&mut out, &line).expect("reference line serializes");
            out.push(b'\n');
        }
    }
    write_atomic(path, &out)
}

/// Frozen prototype bank: textual and visual prototype matrices plus the
/// category manifest and the digest of the sigma table that built it.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub textual: EmbeddingMatrix,
    pub visual: EmbeddingMatrix,
    pub categories: Vec<CategoryRecord>,
    pub sigma_table_hash: String,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    categories: Vec<CategoryRecord>,
    sigma_table_hash: String,
}

/// Bank layout: `"PBNK" | version | C | L_t | L_v | T payload | V payload |
/// meta length u32 | meta JSON | crc32(T ++ V ++ meta)`.
pub fn save_bank(bank: &PrototypeBank, path: &Path) -> Result<()> {
    let c = bank.categories.len() as u32;
    let t_payload = matrix_payload(&bank.textual);
    let v_payload = matrix_payload(&bank.visual);
    let meta = serde_json::to_vec(&BankMeta {
        categories: bank.categories.clone(),
        sigma_table_hash: bank.sigma_table_hash.clone(),
    })
    .expect("bank metadata serializes");

    let mut bytes = Vec::new();
    bytes.extend_from_slice(&BANK_MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&c.to_le_bytes());
    bytes.extend_from_slice(&(bank.textual.dims() as u32).to_le_bytes());
    bytes.extend_from_slice(&(bank.visual.dims() as u32).to_le_bytes());
    bytes.extend_from_slice(&t_payload);
    bytes.extend_from_slice(&v_payload);
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta);

    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&t_payload);
    hasher.update(&v_payload);
    hasher.update(&meta);
    bytes.extend_from_slice(&hasher.finalize().to_le_bytes());
    write_atomic(path, &bytes)
}

pub fn load_bank(path: &Path) -> Result<PrototypeBank> {
    let mut buf = Vec::new();
    File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| io_err(path, e))?;
    let mut off = 0;
    let magic = take(&buf, &mut off, 4, 20)?;
    if magic != BANK_MAGIC {
        return Err(Error::BadMagic {
            expected: BANK_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = read_u32(&buf, &mut off, 20)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let c = read_u32(&buf, &mut off, 20)? as usize;
    let l_t = read_u32(&buf, &mut off, 20)? as usize;
    let l_v = read_u32(&buf, &mut off, 20)? as usize;
    let total = 20 + c * (l_t + l_v) * 4 + 8;
    let t_payload = take(&buf, &mut off, c * l_t * 4, total)?.to_vec();
    let v_payload = take(&buf, &mut off, c * l_v * 4, total)?.to_vec();
    let meta_len = read_u32(&buf, &mut off, total)? as usize;
    let meta_bytes = take(&buf, &mut off, meta_len, total + meta_len)?.to_vec();
    let stored = read_u32(&buf, &mut off, total + meta_len)?;

    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&t_payload);
    hasher.update(&v_payload);
    hasher.update(&meta_bytes);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let meta: BankMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        line: 0,
        msg: format!("bank metadata: {e}"),
    })?;
    if meta.categories.len() != c {
        return Err(Error::RowCountMismatch(format!(
            "bank header says {c} categories, metadata has {}",
            meta.categories.len()
        )));
    }
    Ok(PrototypeBank {
        textual: decode_payload(&t_payload, c, l_t)?,
        visual: decode_payload(&v_payload, c, l_v)?,
        categories: meta.categories,
        sigma_table_hash: meta.sigma_table_hash,
    })
}
