//! Dense descriptor matrices and the `DSC1` binary container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "DSC1" | u32 version = 1 | u32 count | u32 dim
//! count x (u16 byte length, UTF-8 id)
//! count * dim x f32, row-major
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Largest dimension accepted unless the caller raises the limit.
pub const DEFAULT_MAX_DIM: usize = 256;

const MAGIC: &[u8; 4] = b"DSC1";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

/// Id-addressed row-major matrix of `f32` descriptors.
#[derive(Debug, Clone)]
pub struct DescriptorSet {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl PartialEq for DescriptorSet {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.ids == other.ids && self.data == other.data
    }
}

impl DescriptorSet {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::with_max_dim(ids, dim, data, DEFAULT_MAX_DIM)
    }

    pub fn with_max_dim(ids: Vec<String>, dim: usize, data: Vec<f32>, max_dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("descriptor dimension must be positive".into()));
        }
        if dim > max_dim {
            return Err(Error::DimTooLarge { dim, max: max_dim });
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimMismatch {
                expected: ids.len() * dim,
                found: data.len(),
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if id.len() > u16::MAX as usize {
                return Err(Error::InvalidArgument(format!("id longer than {} bytes", u16::MAX)));
            }
            if index.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        for (row, chunk) in data.chunks_exact(dim).enumerate() {
            if let Some(column) = chunk.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    id: ids[row].clone(),
                    column,
                });
            }
        }
        Ok(Self { ids, dim, data, index })
    }

    /// Builds a set from per-row vectors; every row must have the same length.
    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(1, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::with_max_dim(ids, dim, data, usize::MAX)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    /// Flat row-major storage.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|row| self.row(row))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> + '_ {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim))
    }

    /// Rows selected by id, in the order given.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        let mut out_ids = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_ref();
            let row = self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
            data.extend_from_slice(row);
            out_ids.push(id.to_string());
        }
        Self::with_max_dim(out_ids, self.dim, data, usize::MAX)
    }

    /// Same ids, new row data (e.g. after a normalization pass).
    pub fn with_data(&self, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::with_max_dim(self.ids.clone(), dim, data, usize::MAX)
    }

    /// Exact byte size of the `DSC1` encoding of this set.
    pub fn encoded_len(&self) -> u64 {
        let id_bytes: u64 = self.ids.iter().map(|id| 2 + id.len() as u64).sum();
        HEADER_LEN + id_bytes + 4 * self.data.len() as u64
    }
}

/// Byte size of a `DSC1` file holding `count` rows of `dim` floats whose ids
/// total `id_bytes` UTF-8 bytes.
pub fn encoded_len(count: u64, dim: u64, id_bytes: u64) -> u64 {
    HEADER_LEN + 2 * count + id_bytes + 4 * count * dim
}

pub fn write_descriptors<W: Write>(set: &DescriptorSet, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    w.write_all(&(set.dim as u32).to_le_bytes())?;
    for id in &set.ids {
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * set.dim * 1024);
    for chunk in set.data.chunks(set.dim * 1024) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

pub fn save_descriptors(set: &DescriptorSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_descriptors(set, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::MalformedHeader(format!("unexpected end of file while reading {what}")),
        _ => Error::MalformedHeader(e.to_string()),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Decodes a `DSC1` stream. `expected_dim`, when given, must match the header.
pub fn read_descriptors<R: Read>(mut r: R, max_dim: usize, expected_dim: Option<usize>) -> Result<DescriptorSet> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::MalformedHeader(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, "count")? as usize;
    let dim = read_u32(&mut r, "dim")? as usize;
    if dim == 0 {
        return Err(Error::MalformedHeader("dim is zero".into()));
    }
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(Error::DimMismatch { expected, found: dim });
        }
    }
    if dim > max_dim {
        return Err(Error::DimTooLarge { dim, max: max_dim });
    }

    let mut ids = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact_or(&mut r, &mut len, "id length")?;
        let mut bytes = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or(&mut r, &mut bytes, "id")?;
        let id = String::from_utf8(bytes).map_err(|_| Error::MalformedHeader("id is not valid UTF-8".into()))?;
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        ids.push(id);
    }

    let mut raw = vec![0u8; count * dim * 4];
    read_exact_or(&mut r, &mut raw, "vector data")?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::MalformedHeader("trailing bytes after vector data".into())),
        Err(e) => return Err(Error::MalformedHeader(e.to_string())),
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    drop(raw);
    DescriptorSet::with_max_dim(ids, dim, data, max_dim)
}

pub fn load_descriptors(path: impl AsRef<Path>) -> Result<DescriptorSet> {
    load_descriptors_with(path, DEFAULT_MAX_DIM, None)
}

pub fn load_descriptors_with(path: impl AsRef<Path>, max_dim: usize, expected_dim: Option<usize>) -> Result<DescriptorSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_descriptors(BufReader::new(file), max_dim, expected_dim)
}

/// Imports `id,v1,...,vd` rows. A leading header row is skipped when its
/// second field is not numeric.
pub fn import_descriptors_csv(path: impl AsRef<Path>, max_dim: usize) -> Result<DescriptorSet> {
    let path = path.as_ref();
    let name = path.display();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::parse(&name, 0, e.to_string()))?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::parse(&name, line, e.to_string()))?;
        if record.len() < 2 {
            return Err(Error::parse(&name, line, "expected an id and at least one value"));
        }
        if i == 0 && record[1].trim().parse::<f32>().is_err() {
            continue;
        }
        let d = record.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::parse(&name, line, format!("expected {expected} values, found {d}")));
            }
            _ => {}
        }
        ids.push(record[0].to_string());
        for field in record.iter().skip(1) {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(&name, line, format!("not a number: {field:?}")))?;
            data.push(v);
        }
    }
    DescriptorSet::with_max_dim(ids, dim.unwrap_or(1), data, max_dim)
}
