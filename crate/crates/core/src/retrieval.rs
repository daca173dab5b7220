//! Knowledge corpus store, hash embedder, and exact top-k dot-product search
//! used during knowledge-injected synthesis.
//!
//! Corpora here are small (≤10⁴ docs), so search is exact: a streaming k-size
//! heap selection, checked in tests against a full-sort oracle. Ties are
//! broken by ascending `doc_id` so retrieval is deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum embedding dimension accepted by the hash embedder.
pub const MIN_EMBED_DIM: usize = 8;

/// A knowledge document with a dense embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub text: String,
    pub embedding: Vec<f64>,
}

/// A rare entity used as retrieval query during knowledge injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareEntity {
    pub name: String,
    pub embedding: Vec<f64>,
}

fn check_finite(id: &str, embedding: &[f64]) -> Result<()> {
    if embedding.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteEmbedding { id: id.to_string() });
    }
    Ok(())
}

impl CorpusDoc {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>, embedding: Vec<f64>) -> Result<Self> {
        let doc_id = doc_id.into();
        check_finite(&doc_id, &embedding)?;
        Ok(CorpusDoc {
            doc_id,
            text: text.into(),
            embedding,
        })
    }
}

impl RareEntity {
    pub fn new(name: impl Into<String>, embedding: Vec<f64>) -> Result<Self> {
        let name = name.into();
        check_finite(&name, &embedding)?;
        Ok(RareEntity { name, embedding })
    }
}

/// Dot-product similarity between a query and a document embedding.
pub fn similarity(query: &[f64], doc: &[f64]) -> Result<f64> {
    if query.len() != doc.len() {
        return Err(Error::DimensionMismatch {
            left: query.len(),
            right: doc.len(),
        });
    }
    Ok(query.iter().zip(doc).map(|(q, p)| q * p).sum())
}

/// Heap entry ordered so the heap root is the current *worst* retained doc:
/// lowest similarity first, and on equal similarity the *largest* doc_id
/// (which loses the ascending-id tie-break).
struct HeapEntry {
    sim: f64,
    index: usize,
    doc_id_rank: std::cmp::Reverse<String>,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert similarity so the root is worst.
        other
            .sim
            .total_cmp(&self.sim)
            .then_with(|| self.doc_id_rank.cmp(&other.doc_id_rank).reverse())
    }
}

/// Exact top-k retrieval by dot-product similarity.
///
/// Returns `min(k, |corpus|)` docs in descending similarity, ties broken by
/// ascending `doc_id`.
pub fn retrieve_top_k<'a>(
    entity: &RareEntity,
    corpus: &'a [CorpusDoc],
    k: usize,
) -> Result<Vec<&'a CorpusDoc>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("retrieval depth k must be >= 1".into()));
    }
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
    for (index, doc) in corpus.iter().enumerate() {
        let sim = similarity(&entity.embedding, &doc.embedding)?;
        heap.push(HeapEntry {
            sim,
            index,
            doc_id_rank: std::cmp::Reverse(doc.doc_id.clone()),
        });
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut kept: Vec<(f64, usize)> = heap.into_iter().map(|e| (e.sim, e.index)).collect();
    kept.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| corpus[a.1].doc_id.cmp(&corpus[b.1].doc_id))
    });
    Ok(kept.into_iter().map(|(_, i)| &corpus[i]).collect())
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Deterministic feature-hash embedding.
///
/// Lowercased alphanumeric tokens plus token bigrams are hashed (FNV-1a) into
/// `d` signed buckets, then L2-normalized. The same text yields the same
/// vector on every run and platform.
pub fn hash_embedder(text: &str, d: usize) -> Result<Vec<f64>> {
    if d < MIN_EMBED_DIM {
        return Err(Error::DimensionTooSmall {
            dim: d,
            min: MIN_EMBED_DIM,
        });
    }
    let tokens: Vec<String> = text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut v = vec![0.0; d];
    let mut add = |gram: &str| {
        let h = fnv1a(gram.as_bytes());
        let bucket = (h % d as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign;
    };
    for t in &tokens {
        add(t);
    }
    for pair in tokens.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Signed buckets cancelled exactly; treat like empty input.
        return Err(Error::EmptyText);
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusDocRecord {
    doc_id: String,
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RareEntityRecord {
    name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(BufReader::new(file).lines())
}

/// Load a corpus file of `{doc_id, text, embedding?}` lines. Docs without an
/// embedding get one from [`hash_embedder`] at dimension `dim`.
pub fn load_corpus(path: impl AsRef<Path>, dim: usize) -> Result<Vec<CorpusDoc>> {
    let path = path.as_ref();
    let mut docs = Vec::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusDocRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.display().to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        let embedding = match rec.embedding {
            Some(e) => e,
            None => hash_embedder(&rec.text, dim)?,
        };
        let doc = CorpusDoc::new(rec.doc_id, rec.text, embedding)?;
        if doc.embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                left: doc.embedding.len(),
                right: dim,
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Load a rare-entity file of `{name, embedding?}` lines. Missing embeddings
/// are hashed from the entity name.
pub fn load_entities(path: impl AsRef<Path>, dim: usize) -> Result<Vec<RareEntity>> {
    let path = path.as_ref();
    let mut entities = Vec::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RareEntityRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.display().to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        let embedding = match rec.embedding {
            Some(e) => e,
            None => hash_embedder(&rec.name, dim)?,
        };
        let ent = RareEntity::new(rec.name, embedding)?;
        if ent.embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                left: ent.embedding.len(),
                right: dim,
            });
        }
        entities.push(ent);
    }
    Ok(entities)
}

/// Write docs with embeddings filled in, one JSON object per line.
pub fn save_corpus(docs: &[CorpusDoc], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for doc in docs {
        let rec = CorpusDocRecord {
            doc_id: doc.doc_id.clone(),
            text: doc.text.clone(),
            embedding: Some(doc.embedding.clone()),
        };
        out.extend_from_slice(serde_json::to_string(&rec)?.as_bytes());
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(&out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}
