use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatRequest, LanguageModel, TokenScore};

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    fingerprint: String,
    response: String,
}

/// Disk cache in front of another backend, keyed by request fingerprint.
/// One JSON file per request; writes are atomic, so an interrupted run
/// leaves either a complete entry or none.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
}

impl<B: LanguageModel> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    pub fn cached(&self, request: &ChatRequest) -> Option<String> {
        let fp = request.fingerprint();
        let text = std::fs::read_to_string(self.entry_path(&fp)).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        (entry.fingerprint == fp).then_some(entry.response)
    }
}

impl<B: LanguageModel> LanguageModel for CachedBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        request.validate()?;
        if let Some(hit) = self.cached(request) {
            return Ok(hit);
        }
        let response = self.inner.complete(request)?;
        let fingerprint = request.fingerprint();
        let entry = CacheEntry {
            fingerprint: fingerprint.clone(),
            response: response.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
        if let Err(e) = crate::write_atomic(&self.entry_path(&fingerprint), &bytes) {
            log::warn!("could not persist cache entry {fingerprint}: {e}");
        }
        Ok(response)
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<TokenScore, BackendError> {
        self.inner.score(prompt, continuation)
    }
}
