//! Language-model access: chat completion and token scoring.
//!
//! Every pipeline talks to models through [`LanguageModel`]. Three families
//! of implementation live here:
//!
//! - [`ScriptedBackend`] replays canned responses and never touches the
//!   network; identical requests always get identical text.
//! - [`UniformScorer`] / [`StipulatedScorer`] score continuations under a
//!   fixed, hand-specified token distribution.
//! - [`OpenAiBackend`] speaks the OpenAI-compatible HTTP contract, and
//!   [`CachedBackend`] persists its responses on disk by request fingerprint.

mod cache;
mod openai;
mod scripted;

pub use cache::CachedBackend;
pub use openai::{OpenAiBackend, OpenAiConfig, API_BASE_ENV, API_KEY_ENV};
pub use scripted::{ScriptRule, ScriptedBackend, StipulatedScorer, UniformScorer};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub const DEFAULT_MAX_TOKENS: u32 = 1024;

    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            messages: vec![ChatMessage::user(user)],
            temperature: 0.0,
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(BackendError::InvalidRequest("no user message".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} is not a finite non-negative number",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Stable key over (system, messages, temperature, seed). `max_tokens` is
    /// left out so truncation settings do not invalidate recorded scripts.
    pub fn fingerprint(&self) -> String {
        let mut parts: Vec<String> = vec![self.system.clone()];
        for m in &self.messages {
            parts.push(format!("{:?}", m.role));
            parts.push(m.content.clone());
        }
        parts.push(format!("{:?}", self.temperature));
        parts.push(self.seed.map_or_else(|| "-".to_string(), |s| s.to_string()));
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        crate::fingerprint(&refs)
    }

    /// Content of the last user message.
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }
}

/// Per-token log-probabilities of a continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_ids: Vec<u32>,
    pub logprobs: Vec<f64>,
}

impl TokenScore {
    pub fn new(token_ids: Vec<u32>, logprobs: Vec<f64>) -> Result<Self, BackendError> {
        if token_ids.len() != logprobs.len() {
            return Err(BackendError::InvalidResponse(format!(
                "{} token ids but {} logprobs",
                token_ids.len(),
                logprobs.len()
            )));
        }
        if let Some(lp) = logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(BackendError::InvalidResponse(format!(
                "log-probability {lp} is not <= 0"
            )));
        }
        Ok(Self {
            token_ids,
            logprobs,
        })
    }

    pub fn total(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("token budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("operation not supported by this backend")]
    NotSupported,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
}

impl BackendError {
    /// Whether repeating the identical request may succeed. Retryable
    /// failures never leave partial state behind.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Unavailable(_) | Self::BudgetExceeded(_))
    }
}

/// A text generator that may also score continuations.
pub trait LanguageModel: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;

    /// Log-probabilities of `continuation` given `prompt`.
    fn score(&self, _prompt: &str, continuation: &str) -> Result<TokenScore, BackendError> {
        check_continuation(continuation)?;
        Err(BackendError::NotSupported)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<TokenScore, BackendError> {
        (**self).score(prompt, continuation)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<TokenScore, BackendError> {
        (**self).score(prompt, continuation)
    }
}

pub(crate) fn check_continuation(continuation: &str) -> Result<(), BackendError> {
    if continuation.trim().is_empty() {
        return Err(BackendError::InvalidRequest("continuation must be non-empty".into()));
    }
    Ok(())
}

/// FNV-1a, used wherever a stable 32-bit token id is needed.
pub(crate) fn token_id(token: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in token.as_bytes() {
        h ^= u32::from(*b);
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_ignores_max_tokens() {
        let a = ChatRequest::new("sys", "hello").max_tokens(10);
        let b = a.clone().max_tokens(999);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), a.clone().seed(Some(1)).fingerprint());
        assert_ne!(a.fingerprint(), a.clone().temperature(0.7).fingerprint());
    }

    #[test]
    fn request_validation() {
        let mut r = ChatRequest::new("s", "u");
        assert!(r.validate().is_ok());
        r.max_tokens = 0;
        assert!(r.validate().is_err());
        r.max_tokens = 1;
        r.messages[0].role = Role::Assistant;
        assert!(r.validate().is_err());
    }

    #[test]
    fn token_score_invariants() {
        assert!(TokenScore::new(vec![1], vec![]).is_err());
        assert!(TokenScore::new(vec![1], vec![0.5]).is_err());
        assert!(TokenScore::new(vec![1, 2], vec![-0.1, 0.0]).is_ok());
    }

    #[test]
    fn retryable_tags() {
        assert!(BackendError::Unavailable("x".into()).is_retryable());
        assert!(BackendError::BudgetExceeded("x".into()).is_retryable());
        assert!(!BackendError::NotSupported.is_retryable());
    }
}
