//! Checkpoint container.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! "EGONN1"
//! repeated until EOF:
//!   name length, name bytes (UTF-8), shape rank, dims..., f32 values (LE)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"EGONN1";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Self {
        let record = Self {
            name: name.into(),
            shape,
            values,
        };
        assert_eq!(record.shape.iter().product::<usize>(), record.values.len());
        record
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: impl IntoIterator<Item = f64>) -> Self {
        Self::new(name, shape, values.into_iter().map(|v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| *v as f64).collect()
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for r in records {
        out.extend_from_slice(&(r.name.len() as u64).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u64).to_le_bytes());
        for d in &r.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                reason: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(6, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            offset: 0,
            reason: "bad magic, expected EGONN1".into(),
        });
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let start = cur.pos;
        let name_len = cur.u64("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec()).map_err(|_| Error::Malformed {
            path: path.to_path_buf(),
            offset: start as u64,
            reason: "name is not UTF-8".into(),
        })?;
        let rank = cur.u64("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dimension")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = cur.take(count * 4, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(Record { name, shape, values });
    }
    Ok(records)
}

pub fn save(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(&encode(records))
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    decode(&bytes, path)
}
