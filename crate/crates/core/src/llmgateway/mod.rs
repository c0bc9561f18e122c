//! Chat-completion interface shared by live, cached and scripted backends.

mod cache;
mod mock;
mod openai;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheMode, CacheRecord, CachedBackend, ResponseCache};
pub use mock::{Matcher, MockBackend, MockRule, MockScript};
pub use openai::{OpenAiBackend, OpenAiConfig, DEFAULT_MAX_IN_FLIGHT, DEFAULT_RETRIES};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Decode(String),
    #[error("no recorded fixture for request {digest}")]
    MissingFixture { digest: String },
    #[error("no scripted response matches request: {excerpt}")]
    ScriptedGap { excerpt: String },
    #[error("request matches scripted rules {0:?}")]
    AmbiguousScript(Vec<usize>),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("cache entry {digest} already holds a different response")]
    CacheConflict { digest: String },
    #[error("cache i/o error at {path}: {message}")]
    Cache { path: String, message: String },
}

impl GatewayError {
    /// True for failures of the infrastructure rather than of the script or cache contract.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport { .. } | GatewayError::Http { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Decoding {
    pub const fn greedy(max_tokens: u32) -> Self {
        Self {
            temperature: 0.0,
            max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub decoding: Decoding,
    /// Number of alternatives per position when token logprobs are requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>, decoding: Decoding) -> Self {
        Self {
            model: model.into(),
            messages: vec![Message::user(prompt)],
            decoding,
            top_logprobs: None,
        }
    }

    pub fn with_logprobs(mut self, top_k: u32) -> Self {
        self.top_logprobs = Some(top_k);
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages are empty".into()));
        }
        let t = self.decoding.temperature;
        if !(t.is_finite() && t >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {t} must be >= 0"
            )));
        }
        if let Some(k) = self.top_logprobs {
            if k < 2 {
                return Err(GatewayError::InvalidRequest(format!(
                    "top_logprobs {k} must be at least 2"
                )));
            }
        }
        Ok(())
    }

    /// All message contents joined by newlines; what mock matchers look at.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn cache_key(&self) -> CacheKey {
        CacheKey::of(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// One generated position: the sampled token plus the listed alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPosition {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<TokenLogprob>,
}

impl TokenPosition {
    /// The listed alternatives, including the sampled token if the backend omitted it.
    pub fn alternatives(&self) -> Vec<TokenLogprob> {
        let mut alts = self.top_logprobs.clone();
        if !alts.iter().any(|a| a.token == self.token) {
            alts.push(TokenLogprob {
                token: self.token.clone(),
                logprob: self.logprob,
            });
        }
        alts
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenPosition>>,
    #[serde(default)]
    pub usage: Usage,
}

impl CompletionResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: None,
            usage: Usage::default(),
        }
    }

    /// Single-position response whose sampled token is the most likely of `alternatives`.
    pub fn with_alternatives(alternatives: &[(&str, f64)]) -> Self {
        let top_logprobs: Vec<TokenLogprob> = alternatives
            .iter()
            .map(|&(token, logprob)| TokenLogprob {
                token: token.to_string(),
                logprob,
            })
            .collect();
        let best = top_logprobs
            .iter()
            .max_by(|a, b| a.logprob.total_cmp(&b.logprob))
            .cloned()
            .unwrap_or(TokenLogprob {
                token: String::new(),
                logprob: 0.0,
            });
        Self {
            text: best.token.clone(),
            token_logprobs: Some(vec![TokenPosition {
                token: best.token,
                logprob: best.logprob,
                top_logprobs,
            }]),
            usage: Usage::default(),
        }
    }
}

/// Hex SHA-256 over the canonical JSON form of a request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn of(req: &CompletionRequest) -> Self {
        let canonical = serde_json::to_vec(req).expect("requests always serialize");
        CacheKey(hex::encode(Sha256::digest(&canonical)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError>;

    /// Cheap reachability check used by `validate`.
    fn probe(&self) -> Result<(), GatewayError> {
        Ok(())
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        (**self).complete(req)
    }

    fn probe(&self) -> Result<(), GatewayError> {
        (**self).probe()
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        (**self).complete(req)
    }

    fn probe(&self) -> Result<(), GatewayError> {
        (**self).probe()
    }
}

/// Validates the request and dispatches it to `backend`.
pub fn complete(
    backend: &dyn Backend,
    req: &CompletionRequest,
) -> Result<CompletionResponse, GatewayError> {
    req.validate()?;
    backend.complete(req)
}
