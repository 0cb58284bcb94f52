use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{check_continuation, token_id, BackendError, ChatRequest, LanguageModel, Role, TokenScore};

pub const API_KEY_ENV: &str = "COTEDIT_API_KEY";
pub const API_BASE_ENV: &str = "COTEDIT_API_BASE";

#[derive(Debug, Clone, PartialEq)]
pub struct OpenAiConfig {
    /// Base URL up to and including the version segment, e.g.
    /// `https://api.openai.com/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl OpenAiConfig {
    /// Reads `COTEDIT_API_BASE` and `COTEDIT_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, BackendError> {
        let base_url = std::env::var(API_BASE_ENV)
            .map_err(|_| BackendError::Unavailable(format!("{API_BASE_ENV} is not set")))?;
        Ok(Self {
            base_url,
            api_key: std::env::var(API_KEY_ENV).ok(),
            model: model.into(),
            timeout: Duration::from_secs(120),
        })
    }
}

/// Client for an OpenAI-compatible chat-completions server. Scoring uses the
/// legacy `/completions` endpoint with `echo` and `logprobs`, which vLLM and
/// similar servers implement.
pub struct OpenAiBackend {
    config: OpenAiConfig,
    agent: ureq::Agent,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.agent.post(&self.url(path));
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        classify_status(status, &text)?;
        serde_json::from_str(&text).map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }

    pub(crate) fn chat_body(&self, request: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if !request.system.is_empty() {
            messages.push(json!({"role": "system", "content": request.system}));
        }
        for m in &request.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            messages.push(json!({"role": role, "content": m.content}));
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

fn classify_status(status: u16, body: &str) -> Result<(), BackendError> {
    match status {
        200..=299 => Ok(()),
        401 | 403 => Err(BackendError::Unavailable(format!("authentication failed ({status})"))),
        408 | 429 | 500..=599 => Err(BackendError::Unavailable(format!("status {status}: {body}"))),
        400 if body.contains("context length") || body.contains("maximum context") => {
            Err(BackendError::BudgetExceeded(body.to_string()))
        }
        _ => Err(BackendError::Rejected {
            status,
            body: body.to_string(),
        }),
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

pub(crate) fn parse_chat_response(v: Value) -> Result<String, BackendError> {
    let resp: ChatResponse =
        serde_json::from_value(v).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::InvalidResponse("no choices".into()))?;
    if choice.finish_reason.as_deref() == Some("length") {
        return Err(BackendError::BudgetExceeded(
            "completion truncated at max_tokens".into(),
        ));
    }
    choice
        .message
        .content
        .ok_or_else(|| BackendError::InvalidResponse("choice without content".into()))
}

#[derive(Deserialize)]
struct EchoResponse {
    choices: Vec<EchoChoice>,
}

#[derive(Deserialize)]
struct EchoChoice {
    logprobs: EchoLogprobs,
}

#[derive(Deserialize)]
struct EchoLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

/// Picks the echoed tokens that start at or after the end of the prompt.
pub(crate) fn parse_echo_response(v: Value, prompt_chars: usize) -> Result<TokenScore, BackendError> {
    let resp: EchoResponse =
        serde_json::from_value(v).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
    let lp = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::InvalidResponse("no choices".into()))?
        .logprobs;
    let mut ids = Vec::new();
    let mut lps = Vec::new();
    for ((tok, logprob), offset) in lp.tokens.iter().zip(&lp.token_logprobs).zip(&lp.text_offset) {
        if *offset < prompt_chars {
            continue;
        }
        let logprob = logprob
            .ok_or_else(|| BackendError::InvalidResponse("missing continuation logprob".into()))?;
        ids.push(token_id(tok));
        lps.push(logprob.min(0.0));
    }
    if ids.is_empty() {
        return Err(BackendError::InvalidResponse("no continuation tokens echoed".into()));
    }
    TokenScore::new(ids, lps)
}

impl LanguageModel for OpenAiBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        request.validate()?;
        let body = self.chat_body(request);
        parse_chat_response(self.post("chat/completions", &body)?)
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<TokenScore, BackendError> {
        check_continuation(continuation)?;
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{prompt}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let v = self.post("completions", &body)?;
        parse_echo_response(v, prompt.chars().count())
    }
}
