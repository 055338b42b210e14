//! Embedding computation and storage, cosine similarity and exhaustive search.
//!
//! Search is a linear scan over every stored vector. Box scores aggregate the
//! cosine between the query and each of the box's representation vectors
//! (message texts, topic, events, keywords); trace voting takes the max over
//! each trace's stored events.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{BackendError, RetryPolicy};
use crate::ids::{BoxId, EmbeddingId, EventId, TraceId};
use crate::model::{MemoryStore, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Message,
    Topic,
    Event,
    Keyword,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub id: EmbeddingId,
    pub values: Vec<f64>,
    pub dim: usize,
    pub source_text: String,
    pub source_kind: SourceKind,
    pub embedder: String,
}

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero or non-finite vector")]
    DegenerateVector,
    #[error("k must be positive")]
    ZeroK,
    #[error("store has no sealed boxes")]
    NoBoxes,
    #[error("no trace with events to vote for")]
    NoTraces,
    #[error("unknown embedding {0}")]
    UnknownEmbedding(EmbeddingId),
    #[error("embedding backend failed after {attempts} attempt(s): {source}")]
    Backend { attempts: u32, source: BackendError },
    #[error("embedding table: {0}")]
    Table(String),
}

pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;

    fn default_retry(&self) -> RetryPolicy {
        RetryPolicy::live()
    }
}

/// Deterministic offline embedder: SHA-256 of the text, expanded in counter
/// mode, mapped to [-1, 1) per component and normalized to unit length.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    name: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self {
            dim,
            name: format!("hash-{dim}"),
        }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut values = Vec::with_capacity(self.dim);
        let mut block = 0u32;
        while values.len() < self.dim {
            let mut h = Sha256::new();
            h.update(text.as_bytes());
            h.update(block.to_le_bytes());
            let digest = h.finalize();
            for chunk in digest.chunks_exact(8) {
                if values.len() == self.dim {
                    break;
                }
                let x = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                values.push((x >> 11) as f64 / (1u64 << 52) as f64 - 1.0);
            }
            block += 1;
        }
        let norm = norm(&values);
        values.iter_mut().for_each(|v| *v /= norm);
        values
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(self.vector(text))
    }

    fn default_retry(&self) -> RetryPolicy {
        RetryPolicy::once()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

/// Exact-text lookup table with a hash-embedder fallback for unlisted texts.
#[derive(Debug, Clone)]
pub struct ScriptedEmbedder {
    table: HashMap<String, Vec<f64>>,
    fallback: HashEmbedder,
    name: String,
}

impl ScriptedEmbedder {
    pub fn new(table: EmbeddingTable) -> Result<Self, EmbeddingError> {
        for (text, v) in &table.vectors {
            if v.len() != table.dim {
                return Err(EmbeddingError::Table(format!(
                    "vector for {text:?} has {} components, expected {}",
                    v.len(),
                    table.dim
                )));
            }
        }
        Ok(Self {
            fallback: HashEmbedder::new(table.dim),
            name: format!("scripted-{}", table.dim),
            table: table.vectors,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let s = std::fs::read_to_string(path).map_err(|e| EmbeddingError::Table(e.to_string()))?;
        let table: EmbeddingTable =
            serde_json::from_str(&s).map_err(|e| EmbeddingError::Table(e.to_string()))?;
        Self::new(table)
    }
}

impl EmbeddingBackend for ScriptedEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(self
            .table
            .get(text)
            .cloned()
            .unwrap_or_else(|| self.fallback.vector(text)))
    }

    fn default_retry(&self) -> RetryPolicy {
        RetryPolicy::once()
    }
}

/// Embedding backend plus retry policy.
#[derive(Clone)]
pub struct Embedder {
    backend: Arc<dyn EmbeddingBackend>,
    retry: RetryPolicy,
}

impl Embedder {
    pub fn new(backend: Arc<dyn EmbeddingBackend>) -> Self {
        let retry = backend.default_retry();
        Self { backend, retry }
    }

    pub fn hash(dim: usize) -> Self {
        Self::new(Arc::new(HashEmbedder::new(dim)))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn name(&self) -> &str {
        self.backend.name()
    }

    /// Computes a vector without storing it.
    pub fn vector(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let budget = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        let values = loop {
            attempt += 1;
            match self.backend.embed(text) {
                Ok(v) => break v,
                Err(e) if e.is_transient() && attempt < budget => {
                    log::warn!("embedding attempt {attempt}: {e}");
                    std::thread::sleep(self.retry.delay_after(attempt));
                }
                Err(source) => {
                    return Err(EmbeddingError::Backend {
                        attempts: attempt,
                        source,
                    })
                }
            }
        };
        let n = norm(&values);
        if values.is_empty() || !n.is_finite() || n == 0.0 {
            return Err(EmbeddingError::DegenerateVector);
        }
        Ok(values)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `dot(a, b) / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let denom = norm(a) * norm(b);
    if denom == 0.0 || !denom.is_finite() {
        return Err(EmbeddingError::DegenerateVector);
    }
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub box_id: BoxId,
    pub box_index: u64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestTrace {
    pub trace_id: TraceId,
    pub score: f64,
    pub event_id: EventId,
}

impl MemoryStore {
    /// Embeds and stores `text`; identical (embedder, text) pairs share one id.
    pub fn embed(
        &mut self,
        embedder: &Embedder,
        text: &str,
        kind: SourceKind,
    ) -> Result<EmbeddingId, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let key = (embedder.name().to_string(), text.to_string());
        if let Some(id) = self.embedding_cache.get(&key) {
            return Ok(*id);
        }
        let values = embedder.vector(text)?;
        if let Some(dim) = self.embedding_dim() {
            if dim != values.len() {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    got: values.len(),
                });
            }
        }
        let id = self.counters.embedding_id();
        self.embeddings.insert(
            id,
            EmbeddingVector {
                id,
                dim: values.len(),
                values,
                source_text: text.to_string(),
                source_kind: kind,
                embedder: key.0.clone(),
            },
        );
        self.embedding_cache.insert(key, id);
        Ok(id)
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embeddings.values().next().map(|v| v.dim)
    }

    pub fn vector(&self, id: EmbeddingId) -> Result<&[f64], EmbeddingError> {
        self.embeddings
            .get(&id)
            .map(|v| v.values.as_slice())
            .ok_or(EmbeddingError::UnknownEmbedding(id))
    }
}

/// Scores every sealed box and returns the best `k`, highest score first,
/// ties broken by smaller box index.
pub fn top_k_boxes(
    store: &MemoryStore,
    query: &[f64],
    k: usize,
    aggregation: Aggregation,
) -> Result<Vec<ScoredBox>, EmbeddingError> {
    if k == 0 {
        return Err(EmbeddingError::ZeroK);
    }
    let mut scored = Vec::new();
    for b in store.sealed_boxes() {
        let Some(emb) = &b.embeddings else { continue };
        let mut best = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let mut n = 0usize;
        for id in emb.all() {
            let s = cosine(query, store.vector(id)?)?;
            best = best.max(s);
            sum += s;
            n += 1;
        }
        if n == 0 {
            continue;
        }
        let score = match aggregation {
            Aggregation::Max => best,
            Aggregation::Mean => sum / n as f64,
        };
        scored.push(ScoredBox {
            box_id: b.id,
            box_index: b.box_index,
            score,
        });
    }
    if scored.is_empty() {
        return Err(EmbeddingError::NoBoxes);
    }
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.box_index.cmp(&b.box_index))
    });
    scored.truncate(k);
    Ok(scored)
}

/// Event-to-trace vote: the trace holding the single most similar stored event.
/// Ties go to the smaller trace id, then the smaller event id.
pub fn nearest_trace<'a>(
    store: &MemoryStore,
    query: &[f64],
    traces: impl IntoIterator<Item = &'a Trace>,
) -> Result<NearestTrace, EmbeddingError> {
    let mut best: Option<NearestTrace> = None;
    for t in traces {
        for &eid in &t.events {
            let Some(ev) = store.trace_events.get(&eid) else {
                continue;
            };
            let score = cosine(query, store.vector(ev.embedding_id)?)?;
            let better = match &best {
                None => true,
                Some(b) => {
                    score > b.score
                        || (score == b.score && (t.id, eid) < (b.trace_id, b.event_id))
                }
            };
            if better {
                best = Some(NearestTrace {
                    trace_id: t.id,
                    score,
                    event_id: eid,
                });
            }
        }
    }
    best.ok_or(EmbeddingError::NoTraces)
}
