use std::time::Duration;

use serde_json::json;

use super::MemoryError;
use crate::backends::{API_BASE_ENV, API_KEY_ENV};

/// Text encoder producing fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>, MemoryError>;
}

/// Embeds `text`, enforcing non-empty input and the embedder's dimension.
pub fn embed(text: &str, embedder: &dyn Embedder) -> Result<Vec<f32>, MemoryError> {
    if text.trim().is_empty() {
        return Err(MemoryError::EmptyText);
    }
    let v = embedder.embed_raw(text)?;
    if v.len() != embedder.dimension() {
        return Err(MemoryError::DimensionMismatch {
            expected: embedder.dimension(),
            found: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MemoryError::NonFinite);
    }
    Ok(v)
}

/// Lowercased alphanumeric tokens.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Bag of hashed tokens: each token adds 1 to bucket `fnv1a64(token) % d`.
/// Strings whose tokens land in disjoint buckets are orthogonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashBagEmbedder {
    pub dim: usize,
}

impl HashBagEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h % self.dim as u64) as usize
    }
}

impl Embedder for HashBagEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>, MemoryError> {
        let mut v = vec![0f32; self.dim];
        for t in tokens(text) {
            v[self.bucket(&t)] += 1.0;
        }
        Ok(v)
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct HttpEmbedder {
    base_url: String,
    api_key: Option<String>,
    model: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>, dim: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into(),
            api_key,
            model: model.into(),
            dim,
            agent,
        }
    }

    pub fn from_env(model: impl Into<String>, dim: usize) -> Result<Self, MemoryError> {
        let base = std::env::var(API_BASE_ENV)
            .map_err(|_| MemoryError::EmbedderUnavailable(format!("{API_BASE_ENV} is not set")))?;
        Ok(Self::new(base, std::env::var(API_KEY_ENV).ok(), model, dim))
    }
}

pub(crate) fn parse_embedding_response(v: &serde_json::Value) -> Result<Vec<f32>, MemoryError> {
    let arr = v
        .pointer("/data/0/embedding")
        .and_then(|e| e.as_array())
        .ok_or_else(|| MemoryError::EmbedderUnavailable("response without data[0].embedding".into()))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .map(|f| f as f32)
                .ok_or_else(|| MemoryError::EmbedderUnavailable("non-numeric embedding".into()))
        })
        .collect()
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>, MemoryError> {
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req
            .send_json(json!({"model": self.model, "input": text}))
            .map_err(|e| MemoryError::EmbedderUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| MemoryError::EmbedderUnavailable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(MemoryError::EmbedderUnavailable(format!("status {status}: {body}")));
        }
        let v: serde_json::Value = serde_json::from_str(&body)
            .map_err(|e| MemoryError::EmbedderUnavailable(e.to_string()))?;
        parse_embedding_response(&v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_nonempty() {
        let e = HashBagEmbedder::new(64);
        assert_eq!(embed("abc", &e).unwrap(), embed("abc", &e).unwrap());
        assert!(matches!(embed("", &e), Err(MemoryError::EmptyText)));
    }

    #[test]
    fn response_parsing() {
        let v = json!({"data": [{"embedding": [0.5, -1.0]}]});
        assert_eq!(parse_embedding_response(&v).unwrap(), vec![0.5, -1.0]);
        assert!(parse_embedding_response(&json!({})).is_err());
    }
}
