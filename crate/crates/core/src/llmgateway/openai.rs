//! OpenAI-compatible chat-completions backend (blocking HTTP).

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Backend, CompletionRequest, CompletionResponse, GatewayError, TokenLogprob, TokenPosition,
    Usage,
};

pub const DEFAULT_RETRIES: u32 = 3;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub endpoint: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub retries: u32,
    pub initial_backoff_ms: u64,
    pub request_timeout_ms: u64,
    pub max_in_flight: usize,
}

impl OpenAiConfig {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            retries: DEFAULT_RETRIES,
            initial_backoff_ms: 500,
            request_timeout_ms: 120_000,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

/// Counting semaphore bounding concurrent live requests.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    agent: ureq::Agent,
    gate: Semaphore,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(config.request_timeout_ms)))
            .build()
            .into();
        let gate = Semaphore::new(config.max_in_flight);
        Self {
            config,
            agent,
            gate,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.agent.post(self.url("chat/completions"));
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Attempt::Fatal(GatewayError::Decode(e.to_string()))),
            429 | 500..=599 => Err(Attempt::Retry(format!("HTTP {status}: {text}"))),
            _ => Err(Attempt::Fatal(GatewayError::Http { status, body: text })),
        }
    }
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

/// Request body in the chat-completions wire format.
pub(crate) fn wire_body(req: &CompletionRequest) -> Value {
    let mut body = json!({
        "model": req.model,
        "messages": req.messages,
        "temperature": req.decoding.temperature,
        "max_tokens": req.decoding.max_tokens,
    });
    if let Some(k) = req.top_logprobs {
        body["logprobs"] = json!(true);
        body["top_logprobs"] = json!(k);
    }
    body
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WirePosition>>,
}

#[derive(Deserialize)]
struct WirePosition {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TokenLogprob>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Decodes a chat-completions response body.
pub(crate) fn parse_wire(
    value: Value,
    logprobs_requested: bool,
) -> Result<CompletionResponse, GatewayError> {
    let wire: WireResponse =
        serde_json::from_value(value).map_err(|e| GatewayError::Decode(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::Decode("response has no choices".into()))?;
    let token_logprobs = if logprobs_requested {
        choice.logprobs.and_then(|l| l.content).map(|positions| {
            positions
                .into_iter()
                .map(|p| TokenPosition {
                    token: p.token,
                    logprob: p.logprob,
                    top_logprobs: p.top_logprobs,
                })
                .collect()
        })
    } else {
        None
    };
    let usage = wire.usage.map_or_else(Usage::default, |u| Usage {
        prompt_tokens: u.prompt_tokens,
        completion_tokens: u.completion_tokens,
    });
    Ok(CompletionResponse {
        text: choice.message.content.unwrap_or_default(),
        token_logprobs,
        usage,
    })
}

impl Backend for OpenAiBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let body = wire_body(req);
        let _permit = self.gate.acquire();
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&body) {
                Ok(value) => return parse_wire(value, req.top_logprobs.is_some()),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("chat completion attempt {attempt}/{attempts} failed: {msg}");
                    last = msg;
                    if attempt < attempts {
                        thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }

    fn probe(&self) -> Result<(), GatewayError> {
        let mut req = self.agent.get(self.url("models"));
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let resp = req.call().map_err(|e| GatewayError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        if (200..300).contains(&status) {
            Ok(())
        } else {
            Err(GatewayError::Http {
                status,
                body: format!("probe of {} failed", self.url("models")),
            })
        }
    }
}
