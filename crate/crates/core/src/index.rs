//! Multi-vector document index over the target schema with exhaustive
//! MaxSim late-interaction retrieval.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{Embedder, EmbedderSpec, TokenEmbeddings};
use crate::error::{Error, Result};
use crate::schema::{AttributeRef, Schema};

const MAGIC: &[u8; 8] = b"MFINDEX\0";
const FORMAT_VERSION: u32 = 1;

/// Text form of one target attribute before embedding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u32,
    pub target_ref: AttributeRef,
    pub text: String,
    pub table_metadata: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexedDocument {
    pub doc: Document,
    pub embeddings: TokenEmbeddings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticCandidate {
    pub target: AttributeRef,
    pub score: f64,
    pub rank: usize,
}

/// One document per target attribute, in schema order. The text is the
/// attribute's rendered query form, so it carries name, type and both
/// descriptions.
pub fn build_documents(target: &Schema) -> Vec<Document> {
    let mut docs = Vec::with_capacity(target.attribute_count());
    for table in &target.tables {
        for attr in &table.attributes {
            let r = AttributeRef::new(&table.name, &attr.name);
            let text = target
                .render_query(&r)
                .expect("attribute taken from the schema resolves");
            docs.push(Document {
                doc_id: docs.len() as u32,
                target_ref: r,
                text,
                table_metadata: table.description.clone(),
            });
        }
    }
    docs
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Late-interaction score: for each query token take the best cosine over
/// document tokens, then sum. Vectors are stored unit-norm so cosine is the
/// dot product.
pub fn maxsim(query: &TokenEmbeddings, doc: &TokenEmbeddings) -> Result<f64> {
    if !query.is_empty() && !doc.is_empty() && query.dim() != doc.dim() {
        return Err(Error::DimensionMismatch {
            expected: query.dim(),
            actual: doc.dim(),
        });
    }
    Ok(query
        .vectors
        .iter()
        .map(|q| {
            doc.vectors
                .iter()
                .map(|d| dot(q, d))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .filter(|s| s.is_finite())
        .sum())
}

/// Cosine between the mean-pooled, re-normalized token vectors of `a` and `b`.
pub fn pooled_similarity(a: &str, b: &str, embedder: &dyn Embedder) -> Result<f64> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    let (pa, pb) = (mean_pool(&ea), mean_pool(&eb));
    let (na, nb) = (dot(&pa, &pa).sqrt(), dot(&pb, &pb).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(&pa, &pb) / (na * nb)).clamp(-1.0, 1.0))
}

fn mean_pool(e: &TokenEmbeddings) -> Vec<f64> {
    let mut acc = vec![0.0; e.dim()];
    for v in &e.vectors {
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    let n = e.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DocMeta {
    #[serde(flatten)]
    doc: Document,
    tokens: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexMeta {
    embedder: EmbedderSpec,
    dim: usize,
    docs: Vec<DocMeta>,
}

/// Immutable after build; safe to share across threads for retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    embedder: EmbedderSpec,
    dim: usize,
    docs: Vec<IndexedDocument>,
}

impl VectorIndex {
    pub fn empty(embedder: EmbedderSpec, dim: usize) -> Self {
        VectorIndex {
            embedder,
            dim,
            docs: Vec::new(),
        }
    }

    /// Embeds every target attribute document with at most `workers`
    /// threads. Output order is always doc_id order.
    pub fn build(target: &Schema, embedder: &dyn Embedder, workers: usize) -> Result<Self> {
        let docs = build_documents(target);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        let embedded: Vec<Vec<TokenEmbeddings>> = pool.install(|| {
            docs.par_chunks(16)
                .map(|chunk| {
                    let texts: Vec<&str> = chunk.iter().map(|d| d.text.as_str()).collect();
                    embedder.embed_batch(&texts)
                })
                .collect::<Result<_>>()
        })?;
        let mut index = VectorIndex::empty(embedder.spec(), embedder.dim());
        for (doc, embeddings) in docs.into_iter().zip(embedded.into_iter().flatten()) {
            index.insert(doc, embeddings)?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, doc: Document, embeddings: TokenEmbeddings) -> Result<()> {
        if embeddings.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: embeddings.dim(),
            });
        }
        if self.docs.iter().any(|d| d.doc.doc_id == doc.doc_id) {
            return Err(Error::Validation(format!("duplicate doc_id {}", doc.doc_id)));
        }
        self.docs.push(IndexedDocument { doc, embeddings });
        Ok(())
    }

    pub fn embedder_spec(&self) -> &EmbedderSpec {
        &self.embedder
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[IndexedDocument] {
        &self.docs
    }

    /// Top-`k` documents by MaxSim, descending, ties by ascending doc_id.
    pub fn search(&self, query: &TokenEmbeddings, k: usize) -> Result<Vec<SemanticCandidate>> {
        if self.docs.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        let mut scored = self
            .docs
            .iter()
            .map(|d| Ok((maxsim(query, &d.embeddings)?, d)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|(sa, da), (sb, db)| {
            sb.total_cmp(sa).then(da.doc.doc_id.cmp(&db.doc.doc_id))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (score, d))| SemanticCandidate {
                target: d.doc.target_ref.clone(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    /// Embeds the rendered query of `query_ref` and searches.
    pub fn retrieve_topk(
        &self,
        query_ref: &AttributeRef,
        source: &Schema,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<SemanticCandidate>> {
        let text = source.render_query(query_ref)?;
        self.search(&embedder.embed(&text)?, k)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let meta = IndexMeta {
            embedder: self.embedder.clone(),
            dim: self.dim,
            docs: self
                .docs
                .iter()
                .map(|d| DocMeta {
                    doc: d.doc.clone(),
                    tokens: d.embeddings.tokens.clone(),
                })
                .collect(),
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| Error::parse("index metadata", e))?;
        let mut buf = Vec::with_capacity(meta.len() + 20);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        for d in &self.docs {
            for v in &d.embeddings.vectors {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        w.write_all(&buf)
            .map_err(|e| Error::io("<index writer>", e))
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<index reader>", e))?;
        let bad = |m: &str| Error::parse("index file", m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let meta_end = 20usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated metadata"))?;
        let meta: IndexMeta = serde_json::from_slice(&bytes[20..meta_end])
            .map_err(|e| Error::parse("index metadata", e))?;

        let mut floats = bytes[meta_end..].chunks_exact(8);
        if floats.remainder().len() != 0 {
            return Err(bad("trailing bytes in vector section"));
        }
        let mut index = VectorIndex::empty(meta.embedder, meta.dim);
        for dm in meta.docs {
            let mut vectors = Vec::with_capacity(dm.tokens.len());
            for _ in 0..dm.tokens.len() {
                let mut v = Vec::with_capacity(meta.dim);
                for _ in 0..meta.dim {
                    let chunk = floats.next().ok_or_else(|| bad("truncated vectors"))?;
                    v.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
                vectors.push(v);
            }
            index.insert(dm.doc, TokenEmbeddings::new(dm.tokens, vectors)?)?;
        }
        if floats.next().is_some() {
            return Err(bad("more vectors than tokens"));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        VectorIndex::read_from(std::io::BufReader::new(f))
    }
}
