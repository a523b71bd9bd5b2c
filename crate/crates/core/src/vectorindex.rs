//! Exact k-nearest-neighbour search over passage vectors by cosine distance.
//!
//! Vectors are stored as 32-bit floats (the on-disk precision) so an index
//! answers identically before and after a save/load round trip. Ties on
//! distance are broken by insertion order.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddingVector;
use crate::segmenter::Passage;

const MAGIC: &[u8; 4] = b"PQIX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("passage {0} is already indexed")]
    DuplicateId(String),
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector cannot be indexed or queried")]
    ZeroVector,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("unsupported index format version {0}")]
    VersionMismatch(u32),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("index i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub passage_id: String,
    pub document_id: String,
    pub insertion_seq: u64,
    vector: Vec<f32>,
    norm: f64,
}

impl IndexEntry {
    pub fn vector(&self) -> &[f32] {
        &self.vector
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub passage_id: String,
    pub document_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    by_id: HashMap<String, usize>,
    next_seq: u64,
}

fn norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "index dimension must be positive");
        Self {
            dim,
            entries: Vec::new(),
            by_id: HashMap::new(),
            next_seq: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn contains(&self, passage_id: &str) -> bool {
        self.by_id.contains_key(passage_id)
    }

    pub fn insert(&mut self, passage: &Passage, vector: &EmbeddingVector) -> Result<(), IndexError> {
        self.insert_raw(&passage.id, &passage.document_id, vector)
    }

    pub fn insert_raw(
        &mut self,
        passage_id: &str,
        document_id: &str,
        vector: &EmbeddingVector,
    ) -> Result<(), IndexError> {
        let values: Vec<f32> = vector.values().iter().map(|&x| x as f32).collect();
        let seq = self.next_seq;
        self.push_entry(passage_id.to_string(), document_id.to_string(), seq, values)?;
        self.next_seq = seq + 1;
        Ok(())
    }

    fn push_entry(
        &mut self,
        passage_id: String,
        document_id: String,
        insertion_seq: u64,
        vector: Vec<f32>,
    ) -> Result<(), IndexError> {
        if vector.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if self.by_id.contains_key(&passage_id) {
            return Err(IndexError::DuplicateId(passage_id));
        }
        let norm = norm_f32(&vector);
        if norm == 0.0 || !norm.is_finite() {
            return Err(IndexError::ZeroVector);
        }
        self.by_id.insert(passage_id.clone(), self.entries.len());
        self.entries.push(IndexEntry {
            passage_id,
            document_id,
            insertion_seq,
            vector,
            norm,
        });
        Ok(())
    }

    /// Exact search. Results are sorted by ascending distance, then by
    /// insertion order, and restricted to `allowed_documents` when given.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        allowed_documents: Option<&HashSet<String>>,
    ) -> Result<Vec<ScoredHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let query_norm = query.norm();
        if query_norm == 0.0 {
            return Err(IndexError::ZeroVector);
        }

        let mut scored: Vec<(f64, u64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| allowed_documents.is_none_or(|allowed| allowed.contains(&e.document_id)))
            .map(|(i, e)| {
                let dot: f64 = e
                    .vector
                    .iter()
                    .zip(query.values())
                    .map(|(&x, &q)| f64::from(x) * q)
                    .sum();
                let distance = (1.0 - dot / (e.norm * query_norm)).clamp(0.0, 2.0);
                (distance, e.insertion_seq, i)
            })
            .collect();

        let order = |a: &(f64, u64, usize), b: &(f64, u64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);

        Ok(scored
            .into_iter()
            .map(|(distance, _, i)| {
                let e = &self.entries[i];
                ScoredHit {
                    passage_id: e.passage_id.clone(),
                    document_id: e.document_id.clone(),
                    distance,
                }
            })
            .collect())
    }

    /// Drops every entry belonging to `document_id` and returns how many went.
    pub fn remove_document(&mut self, document_id: &str) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| e.document_id != document_id);
        let removed = before - self.entries.len();
        if removed > 0 {
            self.by_id = self
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| (e.passage_id.clone(), i))
                .collect();
        }
        removed
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Layout, all integers little-endian:
    /// `"PQIX" | version u32 | dim u32 | next_seq u64 | count u64`, then per
    /// entry `id_len u32 | id | doc_len u32 | doc | seq u64 | dim u32 | dim x f32`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), IndexError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.next_seq.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            write_str(w, &e.passage_id)?;
            write_str(w, &e.document_id)?;
            w.write_all(&e.insertion_seq.to_le_bytes())?;
            w.write_all(&(e.vector.len() as u32).to_le_bytes())?;
            for x in &e.vector {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads an index; when `expected_dim` is given the stored dimension must match.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self, IndexError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, expected_dim)
    }

    pub fn read_from<R: Read>(r: &mut R, expected_dim: Option<usize>) -> Result<Self, IndexError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(IndexError::VersionMismatch(version));
        }
        let dim = read_u32(r)? as usize;
        if dim == 0 {
            return Err(IndexError::Corrupt("zero dimension".into()));
        }
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(IndexError::DimensionMismatch { expected, actual: dim });
            }
        }
        let next_seq = read_u64(r)?;
        let count = read_u64(r)?;
        let mut index = VectorIndex::new(dim);
        for _ in 0..count {
            let passage_id = read_str(r)?;
            let document_id = read_str(r)?;
            let seq = read_u64(r)?;
            let entry_dim = read_u32(r)? as usize;
            if entry_dim != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    actual: entry_dim,
                });
            }
            if seq >= next_seq {
                return Err(IndexError::Corrupt(format!("entry sequence {seq} beyond header {next_seq}")));
            }
            let mut vector = Vec::with_capacity(dim);
            let mut buf = [0u8; 4];
            for _ in 0..dim {
                r.read_exact(&mut buf).map_err(truncated)?;
                vector.push(f32::from_le_bytes(buf));
            }
            index.push_entry(passage_id, document_id, seq, vector)?;
        }
        index.next_seq = next_seq;
        Ok(index)
    }
}

fn truncated(e: std::io::Error) -> IndexError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        IndexError::Corrupt("truncated file".into())
    } else {
        IndexError::Io(e)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IndexError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, IndexError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, IndexError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| IndexError::Corrupt("identifier is not UTF-8".into()))
}
