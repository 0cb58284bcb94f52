use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_continuation, token_id, BackendError, ChatRequest, LanguageModel, TokenScore};

/// Substring rule: responds when the last user message contains `contains`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub contains: String,
    pub response: String,
}

/// Deterministic test double. Lookup order: exact request fingerprint, then
/// the first matching substring rule, then the default.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedBackend {
    #[serde(default)]
    pub entries: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default: Option<String>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn respond(mut self, request: &ChatRequest, response: impl Into<String>) -> Self {
        self.entries.insert(request.fingerprint(), response.into());
        self
    }

    pub fn rule(mut self, contains: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            contains: contains.into(),
            response: response.into(),
        });
        self
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default = Some(response.into());
        self
    }

    pub fn from_json_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Unavailable(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidResponse(format!("{}: {e}", path.display())))
    }
}

impl LanguageModel for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        request.validate()?;
        if let Some(r) = self.entries.get(&request.fingerprint()) {
            return Ok(r.clone());
        }
        let user = request.last_user();
        if let Some(rule) = self.rules.iter().find(|r| user.contains(&r.contains)) {
            return Ok(rule.response.clone());
        }
        self.default.clone().ok_or_else(|| {
            BackendError::Unavailable(format!(
                "no scripted response for request {}",
                request.fingerprint()
            ))
        })
    }
}

/// Scores every whitespace token with probability `1 / vocab`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformScorer {
    pub vocab: usize,
}

impl LanguageModel for UniformScorer {
    fn complete(&self, _request: &ChatRequest) -> Result<String, BackendError> {
        Err(BackendError::NotSupported)
    }

    fn score(&self, _prompt: &str, continuation: &str) -> Result<TokenScore, BackendError> {
        check_continuation(continuation)?;
        if self.vocab == 0 {
            return Err(BackendError::InvalidRequest("empty vocabulary".into()));
        }
        let lp = -(self.vocab as f64).ln();
        let ids: Vec<u32> = continuation.split_whitespace().map(token_id).collect();
        let n = ids.len();
        TokenScore::new(ids, vec![lp; n])
    }
}

/// Scores each whitespace token with a stipulated, position-independent
/// probability; unlisted tokens get `fallback`.
#[derive(Debug, Clone, PartialEq)]
pub struct StipulatedScorer {
    pub probs: HashMap<String, f64>,
    pub fallback: f64,
}

impl StipulatedScorer {
    pub fn new(fallback: f64) -> Self {
        Self {
            probs: HashMap::new(),
            fallback,
        }
    }

    pub fn token(mut self, token: impl Into<String>, p: f64) -> Self {
        self.probs.insert(token.into(), p);
        self
    }
}

impl LanguageModel for StipulatedScorer {
    fn complete(&self, _request: &ChatRequest) -> Result<String, BackendError> {
        Err(BackendError::NotSupported)
    }

    fn score(&self, _prompt: &str, continuation: &str) -> Result<TokenScore, BackendError> {
        check_continuation(continuation)?;
        let mut ids = Vec::new();
        let mut lps = Vec::new();
        for tok in continuation.split_whitespace() {
            let p = self.probs.get(tok).copied().unwrap_or(self.fallback);
            if !(p > 0.0 && p <= 1.0) {
                return Err(BackendError::InvalidRequest(format!(
                    "probability {p} for {tok:?} outside (0, 1]"
                )));
            }
            ids.push(token_id(tok));
            lps.push(p.ln());
        }
        TokenScore::new(ids, lps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_single_entry() {
        let req = ChatRequest::new("sys", "q");
        let b = ScriptedBackend::new().respond(&req, "canned");
        assert_eq!(b.complete(&req).unwrap(), "canned");
        assert_eq!(b.complete(&req).unwrap(), b.complete(&req).unwrap());
        assert!(matches!(
            b.complete(&ChatRequest::new("sys", "other")),
            Err(BackendError::Unavailable(_))
        ));
    }

    #[test]
    fn scripted_lookup_order() {
        let req = ChatRequest::new("sys", "Question: alpha");
        let b = ScriptedBackend::new()
            .rule("alpha", "by rule")
            .with_default("fallback");
        assert_eq!(b.complete(&req).unwrap(), "by rule");
        let b = b.respond(&req, "exact");
        assert_eq!(b.complete(&req).unwrap(), "exact");
        assert_eq!(b.complete(&ChatRequest::new("s", "zzz")).unwrap(), "fallback");
    }

    #[test]
    fn uniform_vocab_four() {
        let s = UniformScorer { vocab: 4 }.score("p", "a b c").unwrap();
        assert_eq!(s.len(), 3);
        for lp in &s.logprobs {
            assert!((lp - (0.25f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn stipulated_half() {
        let s = StipulatedScorer::new(0.1)
            .token("a", 0.5)
            .score("p", "a a")
            .unwrap();
        assert_eq!(s.logprobs, vec![0.5f64.ln(), 0.5f64.ln()]);
    }

    #[test]
    fn empty_continuation_rejected() {
        assert!(matches!(
            UniformScorer { vocab: 4 }.score("p", ""),
            Err(BackendError::InvalidRequest(_))
        ));
        assert!(matches!(
            ScriptedBackend::new().score("p", " "),
            Err(BackendError::InvalidRequest(_))
        ));
        assert_eq!(
            ScriptedBackend::new().score("p", "x"),
            Err(BackendError::NotSupported)
        );
    }
}
