//! Embedded dense-vector collections with exact top-k cosine search.
//!
//! Search is a flat scan, so results are exact. Ties are broken by
//! `chunk_id` ascending, which makes every ranking a total order.
//!
//! Snapshot layout for one collection:
//! `meta.json`, `records.bin` (per record: u32 id length, id bytes, u32
//! payload length, payload JSON bytes, `dim` little-endian f32 values) and
//! `checksum` (hex CRC32 over `meta.json` followed by `records.bin`).

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, EmbeddingVector};
use crate::error::{Error, Result};

pub type Payload = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRecord {
    pub chunk_id: String,
    pub vector: EmbeddingVector,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionMeta {
    pub name: String,
    pub dim: usize,
    pub metric: Metric,
    pub count: usize,
}

/// A `(chunk_id, score)` pair from a single store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: String,
    pub score: f64,
}

/// Descending score, then ascending chunk id.
pub fn rank_order(a: &ScoredChunk, b: &ScoredChunk) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.chunk_id.cmp(&b.chunk_id))
}

#[derive(Debug, Clone)]
pub struct Collection {
    name: String,
    dim: usize,
    records: Vec<VectorRecord>,
    ids: HashMap<String, usize>,
}

impl Collection {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Collection {
            name: name.into(),
            dim,
            records: Vec::new(),
            ids: HashMap::new(),
        }
    }

    pub fn meta(&self) -> CollectionMeta {
        CollectionMeta {
            name: self.name.clone(),
            dim: self.dim,
            metric: Metric::Cosine,
            count: self.records.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[VectorRecord] {
        &self.records
    }

    /// Insert a batch. The batch is validated up front and rejected whole.
    pub fn insert(&mut self, records: Vec<VectorRecord>) -> Result<usize> {
        let mut batch_ids = std::collections::HashSet::new();
        for r in &records {
            if r.vector.dim() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: r.vector.dim(),
                });
            }
            if self.ids.contains_key(&r.chunk_id) || !batch_ids.insert(r.chunk_id.as_str()) {
                return Err(Error::DuplicateId(r.chunk_id.clone()));
            }
        }
        let n = records.len();
        for r in records {
            self.ids.insert(r.chunk_id.clone(), self.records.len());
            self.records.push(r);
        }
        Ok(n)
    }

    pub fn search_topk(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: Option<&Payload>,
    ) -> Result<Vec<ScoredChunk>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        if k == 0 {
            return Err(Error::invalid_request("k", "must be at least 1"));
        }
        let mut hits = Vec::new();
        for r in &self.records {
            if let Some(f) = filter {
                if !f.iter().all(|(key, val)| r.payload.get(key) == Some(val)) {
                    continue;
                }
            }
            hits.push(ScoredChunk {
                chunk_id: r.chunk_id.clone(),
                score: cosine_similarity(query, &r.vector)?,
            });
        }
        hits.sort_by(rank_order);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = serde_json::to_vec_pretty(&self.meta())?;
        let mut bin = Vec::new();
        for r in &self.records {
            let payload = serde_json::to_vec(&r.payload)?;
            bin.extend_from_slice(&(r.chunk_id.len() as u32).to_le_bytes());
            bin.extend_from_slice(r.chunk_id.as_bytes());
            bin.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            bin.extend_from_slice(&payload);
            for v in r.vector.values() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join("meta.json"), &meta)?;
        fs::write(dir.join("records.bin"), &bin)?;
        fs::write(dir.join("checksum"), checksum_hex(&[&meta, &bin]))?;
        Ok(())
    }

    pub fn restore(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            fs::read(dir.join(name))
                .map_err(|e| Error::CorruptSnapshot(format!("{}/{name}: {e}", dir.display())))
        };
        let meta_bytes = read("meta.json")?;
        let bin = read("records.bin")?;
        let stored = String::from_utf8_lossy(&read("checksum")?).trim().to_string();
        if stored != checksum_hex(&[&meta_bytes, &bin]) {
            return Err(Error::CorruptSnapshot(format!("{}: checksum mismatch", dir.display())));
        }
        let meta: CollectionMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::CorruptSnapshot(format!("meta.json: {e}")))?;
        let mut reader = ByteReader { buf: &bin, pos: 0 };
        let mut records = Vec::with_capacity(meta.count);
        for _ in 0..meta.count {
            let id_len = reader.u32()? as usize;
            let chunk_id = String::from_utf8(reader.take(id_len)?.to_vec())
                .map_err(|e| Error::CorruptSnapshot(e.to_string()))?;
            let payload_len = reader.u32()? as usize;
            let payload: Payload = serde_json::from_slice(reader.take(payload_len)?)
                .map_err(|e| Error::CorruptSnapshot(e.to_string()))?;
            let mut values = Vec::with_capacity(meta.dim);
            for _ in 0..meta.dim {
                values.push(f32::from_le_bytes(reader.take(4)?.try_into().expect("4 bytes")));
            }
            records.push(VectorRecord {
                chunk_id,
                vector: EmbeddingVector(values),
                payload,
            });
        }
        if reader.pos != bin.len() {
            return Err(Error::CorruptSnapshot("trailing bytes in records.bin".into()));
        }
        let mut c = Collection::new(meta.name, meta.dim);
        c.insert(records)
            .map_err(|e| Error::CorruptSnapshot(e.to_string()))?;
        Ok(c)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptSnapshot("records.bin truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub(crate) fn checksum_hex(parts: &[&[u8]]) -> String {
    let mut hasher = crc32fast::Hasher::new();
    for p in parts {
        hasher.update(p);
    }
    format!("{:08x}", hasher.finalize())
}

/// Named collections.
#[derive(Debug, Clone, Default)]
pub struct VectorStore {
    collections: BTreeMap<String, Collection>,
}

impl VectorStore {
    pub fn new() -> Self {
        VectorStore::default()
    }

    pub fn create_collection(&mut self, name: &str, dim: usize) -> Result<CollectionMeta> {
        if self.collections.contains_key(name) {
            return Err(Error::AlreadyExists(name.to_string()));
        }
        let c = Collection::new(name, dim);
        let meta = c.meta();
        self.collections.insert(name.to_string(), c);
        Ok(meta)
    }

    pub fn add_collection(&mut self, collection: Collection) -> Result<()> {
        if self.collections.contains_key(&collection.name) {
            return Err(Error::AlreadyExists(collection.name.clone()));
        }
        self.collections.insert(collection.name.clone(), collection);
        Ok(())
    }

    pub fn collection(&self, name: &str) -> Result<&Collection> {
        self.collections
            .get(name)
            .ok_or_else(|| Error::UnknownCollection(name.to_string()))
    }

    pub fn collection_mut(&mut self, name: &str) -> Result<&mut Collection> {
        self.collections
            .get_mut(name)
            .ok_or_else(|| Error::UnknownCollection(name.to_string()))
    }

    pub fn insert(&mut self, name: &str, records: Vec<VectorRecord>) -> Result<usize> {
        self.collection_mut(name)?.insert(records)
    }

    pub fn search_topk(
        &self,
        name: &str,
        query: &EmbeddingVector,
        k: usize,
        filter: Option<&Payload>,
    ) -> Result<Vec<ScoredChunk>> {
        self.collection(name)?.search_topk(query, k, filter)
    }
}
