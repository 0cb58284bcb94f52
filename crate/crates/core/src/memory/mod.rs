//! Vector memory of edit facts with exact nearest-neighbour search.

mod embed;
mod persist;

pub use embed::{embed, tokens, Embedder, HashBagEmbedder, HttpEmbedder};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{EditContext, EditFact};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("text to embed is empty")]
    EmptyText,
    #[error("dimension mismatch: memory has {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding has non-finite components")]
    NonFinite,
    #[error("memory is empty")]
    EmptyMemory,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("memory persistence: {0}")]
    Io(#[from] std::io::Error),
    #[error("memory manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Dot,
}

/// What a memory entry stores: a structured fact or an edit context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MemoryPayload {
    Fact(EditFact),
    Context(EditContext),
}

impl MemoryPayload {
    pub fn text(&self) -> String {
        match self {
            Self::Fact(f) => f.sentence(),
            Self::Context(c) => c.text.trim().to_string(),
        }
    }

    pub fn is_context(&self) -> bool {
        matches!(self, Self::Context(_))
    }

    fn id(&self) -> String {
        let kind = if self.is_context() { "context" } else { "fact" };
        let fp = crate::fingerprint(&[kind, &self.text()]);
        format!("f{}", &fp[..16])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactEmbedding {
    pub fact_id: String,
    pub vector: Vec<f32>,
    pub payload: MemoryPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub fact_id: String,
    pub score: f64,
    /// Insertion index of the entry.
    pub index: usize,
}

/// Exact (exhaustive) vector store. Readers may share a snapshot freely;
/// inserts need `&mut`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMemory {
    dimension: usize,
    metric: Metric,
    entries: Vec<FactEmbedding>,
    by_id: HashMap<String, usize>,
}

impl VectorMemory {
    pub fn new(dimension: usize, metric: Metric) -> Self {
        Self {
            dimension,
            metric,
            entries: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[FactEmbedding] {
        &self.entries
    }

    pub fn get(&self, fact_id: &str) -> Option<&FactEmbedding> {
        self.by_id.get(fact_id).map(|&i| &self.entries[i])
    }

    /// Embeds and stores `payload`. Re-inserting an identical payload returns
    /// the existing id.
    pub fn insert(&mut self, payload: MemoryPayload, embedder: &dyn Embedder) -> Result<String, MemoryError> {
        if embedder.dimension() != self.dimension {
            return Err(MemoryError::DimensionMismatch {
                expected: self.dimension,
                found: embedder.dimension(),
            });
        }
        let id = payload.id();
        if self.by_id.contains_key(&id) {
            return Ok(id);
        }
        let vector = embed(&payload.text(), embedder)?;
        self.push(FactEmbedding {
            fact_id: id.clone(),
            vector,
            payload,
        })?;
        Ok(id)
    }

    pub(crate) fn push(&mut self, entry: FactEmbedding) -> Result<(), MemoryError> {
        if entry.vector.len() != self.dimension {
            return Err(MemoryError::DimensionMismatch {
                expected: self.dimension,
                found: entry.vector.len(),
            });
        }
        if entry.vector.iter().any(|x| !x.is_finite()) {
            return Err(MemoryError::NonFinite);
        }
        if self.by_id.contains_key(&entry.fact_id) {
            return Err(MemoryError::Manifest(format!("duplicate fact id {}", entry.fact_id)));
        }
        self.by_id.insert(entry.fact_id.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn similarity(&self, a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        match self.metric {
            Metric::Dot => dot,
            Metric::Cosine => {
                let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
        }
    }

    /// The `k` best entries for a query vector, best first; ties keep
    /// insertion order.
    pub fn search_vector(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>, MemoryError> {
        if k == 0 {
            return Err(MemoryError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(MemoryError::EmptyMemory);
        }
        if query.len() != self.dimension {
            return Err(MemoryError::DimensionMismatch {
                expected: self.dimension,
                found: query.len(),
            });
        }
        let mut hits: Vec<SearchHit> = self
            .entries
            .iter()
            .enumerate()
            .map(|(index, e)| SearchHit {
                fact_id: e.fact_id.clone(),
                score: self.similarity(query, &e.vector),
                index,
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
        hits.truncate(k);
        Ok(hits)
    }
}

/// Embeds `query` and returns the `k` most similar entries.
pub fn search_top_k(
    memory: &VectorMemory,
    query: &str,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<SearchHit>, MemoryError> {
    if k == 0 {
        return Err(MemoryError::InvalidK);
    }
    if memory.is_empty() {
        return Err(MemoryError::EmptyMemory);
    }
    let q = embed(query, embedder)?;
    memory.search_vector(&q, k)
}
