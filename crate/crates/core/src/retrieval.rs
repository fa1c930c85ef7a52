//! Geo-tagged global descriptor database, exact nearest-neighbor search and
//! Recall@N evaluation.
//!
//! Database file, all little-endian:
//!
//! ```text
//! "EGODB1", entry count u64
//! per entry: id u64, 256 × f32 descriptor, 12 × f32 pose (row-major 3×4),
//!            path length u64, path bytes (UTF-8)
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::POSE_FILE_TOLERANCE;
use crate::error::{Error, Result};
use crate::geometry::PoseSE3;

pub const DB_MAGIC: &[u8; 6] = b"EGODB1";
pub const DB_DESCRIPTOR_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub id: u64,
    pub descriptor: Vec<f32>,
    /// Row-major 3×4 pose as stored.
    pub pose: [f32; 12],
    pub path: String,
}

impl DbEntry {
    /// Stored pose with its rotation re-orthonormalized after `f32` storage.
    pub fn pose(&self) -> Result<PoseSE3> {
        PoseSE3::from_row_major(&self.pose.map(|v| v as f64), POSE_FILE_TOLERANCE)
    }

    pub fn position(&self) -> [f64; 3] {
        [self.pose[3] as f64, self.pose[7] as f64, self.pose[11] as f64]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptorDB {
    entries: Vec<DbEntry>,
    ids: HashSet<u64>,
}

impl DescriptorDB {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn get(&self, id: u64) -> Option<&DbEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn add(&mut self, id: u64, descriptor: &[f64], pose: &PoseSE3, path: &str) -> Result<()> {
        let values = pose.to_row_major().map(|v| v as f32);
        self.add_entry(DbEntry {
            id,
            descriptor: descriptor.iter().map(|v| *v as f32).collect(),
            pose: values,
            path: path.to_string(),
        })
    }

    pub fn add_entry(&mut self, entry: DbEntry) -> Result<()> {
        if entry.descriptor.len() != DB_DESCRIPTOR_DIM {
            return Err(Error::Shape(format!(
                "database descriptors have {DB_DESCRIPTOR_DIM} values, got {}",
                entry.descriptor.len()
            )));
        }
        if entry.descriptor.iter().chain(&entry.pose).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("database entry {}", entry.id)));
        }
        if !self.ids.insert(entry.id) {
            return Err(Error::DuplicateId(entry.id));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DB_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.id.to_le_bytes());
            for v in e.descriptor.iter().chain(&e.pose) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(e.path.len() as u64).to_le_bytes());
            out.extend_from_slice(e.path.as_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        if cur.take(6, "magic")? != DB_MAGIC {
            return Err(cur.malformed(0, "bad magic, expected EGODB1"));
        }
        let count = cur.u64("entry count")?;
        let mut db = DescriptorDB::new();
        for _ in 0..count {
            let id = cur.u64("id")?;
            let descriptor = cur.f32s(DB_DESCRIPTOR_DIM, "descriptor")?;
            let pose: [f32; 12] = cur.f32s(12, "pose")?.try_into().expect("12 values");
            let len = cur.u64("path length")? as usize;
            let start = cur.pos;
            let raw = cur.take(len, "path")?.to_vec();
            let path_str = String::from_utf8(raw).map_err(|_| cur.malformed(start, "path is not UTF-8"))?;
            db.add_entry(DbEntry {
                id,
                descriptor,
                pose,
                path: path_str,
            })?;
        }
        if cur.pos != bytes.len() {
            return Err(cur.malformed(cur.pos, "trailing bytes after the last entry"));
        }
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::decode(&bytes, path)
    }

    /// The `k` entries closest to `q` in Euclidean distance as `(id, distance)`,
    /// ties broken by ascending id. Exact linear scan.
    pub fn query_topk(&self, q: &[f64], k: usize) -> Vec<(u64, f64)> {
        let mut scored: Vec<(u64, f64)> = self
            .entries
            .iter()
            .map(|e| {
                let d2: f64 = e.descriptor.iter().zip(q).map(|(a, b)| (*a as f64 - b).powi(2)).sum();
                (e.id, d2.sqrt())
            })
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        scored.truncate(k.max(1));
        scored
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn malformed(&self, offset: usize, reason: &str) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.malformed(self.pos, &format!("truncated {what}")));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallEntry {
    pub n: usize,
    pub threshold_m: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub recall: Vec<RecallEntry>,
    /// Ranked ids per query, as long as the largest N.
    pub topk: Vec<Vec<u64>>,
}

pub const RECALL_CSV_HEADER: &str = "N,threshold_m,recall";

impl RetrievalReport {
    pub fn recall_at(&self, n: usize, threshold_m: f64) -> Option<f64> {
        self.recall
            .iter()
            .find(|r| r.n == n && r.threshold_m == threshold_m)
            .map(|r| r.recall)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{RECALL_CSV_HEADER}\n");
        for r in &self.recall {
            writeln!(s, "{},{},{:.6}", r.n, r.threshold_m, r.recall).expect("string write");
        }
        s
    }
}

/// Query is localized at `(N, d)` when one of its top-N entries lies within
/// `d` meters of its ground-truth position.
pub fn evaluate_recall(
    db: &DescriptorDB,
    queries: &[(Vec<f64>, PoseSE3)],
    ns: &[usize],
    thresholds: &[f64],
) -> Result<RetrievalReport> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("recall evaluation needs at least one query"));
    }
    if db.is_empty() {
        return Err(Error::EmptyInput("recall evaluation needs a non-empty database"));
    }
    let kmax = ns.iter().copied().max().unwrap_or(1).max(1);
    let topk: Vec<Vec<u64>> = queries
        .iter()
        .map(|(d, _)| db.query_topk(d, kmax).into_iter().map(|(id, _)| id).collect())
        .collect();
    let mut recall = Vec::new();
    for &n in ns {
        for &thr in thresholds {
            let hits = queries
                .iter()
                .zip(&topk)
                .filter(|((_, pose), ids)| {
                    ids.iter().take(n).any(|id| {
                        let p = db.get(*id).expect("ranked ids exist").position();
                        let t = pose.translation;
                        ((p[0] - t.x).powi(2) + (p[1] - t.y).powi(2) + (p[2] - t.z).powi(2)).sqrt() <= thr
                    })
                })
                .count();
            recall.push(RecallEntry {
                n,
                threshold_m: thr,
                recall: hits as f64 / queries.len() as f64,
            });
        }
    }
    Ok(RetrievalReport { recall, topk })
}

/// Expected Recall@1 when the top-1 entry is uniformly random: the mean
/// fraction of database positions within `threshold_m` of each query.
pub fn chance_recall_at_1(db_positions: &[[f64; 3]], query_positions: &[[f64; 3]], threshold_m: f64) -> f64 {
    let near = |q: &[f64; 3]| {
        db_positions
            .iter()
            .filter(|p| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt() <= threshold_m)
            .count()
    };
    query_positions.iter().map(|q| near(q) as f64 / db_positions.len() as f64).sum::<f64>()
        / query_positions.len() as f64
}
