//! Chat-completions wire format, transports, and retry policy.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where and how real-mode calls are sent. The API key is never stored:
/// only the name of the environment variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendEndpoint {
    pub base_url: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// First backoff delay; each retry doubles it.
    pub backoff_secs: f64,
    pub temperature: f64,
    /// Concurrent calls allowed inside one fan-out stage.
    pub max_in_flight: usize,
}

impl Default for BackendEndpoint {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "local-model".into(),
            api_key_env: None,
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_secs: 1.0,
            temperature: 0.0,
            max_in_flight: 1,
        }
    }
}

impl BackendEndpoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::config("backend.timeout_secs", "must be > 0"));
        }
        if !(self.backoff_secs >= 0.0) {
            return Err(Error::config("backend.backoff_secs", "must be >= 0"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::config("backend.max_in_flight", "must be >= 1"));
        }
        if self.base_url.trim().is_empty() {
            return Err(Error::config("backend.base_url", "must not be empty"));
        }
        Ok(())
    }

    /// Delay before retry `attempt` (0-based): base, 2x base, 4x base, ...
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_secs * f64::from(1u32 << attempt.min(16)))
    }

    fn api_key(&self) -> Result<Option<String>> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| Error::Backend(format!("environment variable {var} is not set"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub tokens: u64,
}

/// Extracts the first choice's content and the token usage from a
/// chat-completions response body.
pub fn parse_response(body: &serde_json::Value) -> Result<ChatResponse> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Parse("response has no choices[0].message.content".into()))?;
    let usage = body.get("usage");
    let field = |k: &str| usage.and_then(|u| u.get(k)).and_then(|v| v.as_u64());
    let tokens = field("total_tokens")
        .or_else(|| Some(field("prompt_tokens")? + field("completion_tokens")?))
        .ok_or_else(|| Error::Parse("response has no usage token counts".into()))?;
    Ok(ChatResponse {
        text: text.to_string(),
        tokens,
    })
}

/// One attempt at one chat call. `Error::Backend` is retried, anything
/// else is not.
pub trait ChatTransport: Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

/// Blocking HTTP transport posting to `{base_url}/chat/completions`.
pub struct HttpTransport {
    endpoint: BackendEndpoint,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { endpoint, agent })
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let url = format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(key) = self.endpoint.api_key()? {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| Error::Backend(e.to_string()))?;
        let status = resp.status();
        let body = resp.body_mut().read_to_string().map_err(|e| Error::Backend(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Error::Backend(format!("HTTP {status}: {body}")));
        }
        if !status.is_success() {
            return Err(Error::Parse(format!("HTTP {status}: {body}")));
        }
        let json: serde_json::Value = serde_json::from_str(&body).map_err(|e| Error::Parse(e.to_string()))?;
        parse_response(&json)
    }
}

/// Scripted transport for tests and offline runs. Each `send` pops the next
/// scripted result and records the request.
#[derive(Default)]
pub struct MockTransport {
    script: Mutex<VecDeque<Result<ChatResponse>>>,
    requests: Mutex<Vec<ChatRequest>>,
    fallback: Option<ChatResponse>,
}

impl MockTransport {
    pub fn new(script: Vec<Result<ChatResponse>>) -> Self {
        Self {
            script: Mutex::new(script.into()),
            ..Self::default()
        }
    }

    /// Answers every call with the same text once the script runs out.
    pub fn constant(text: &str, tokens: u64) -> Self {
        Self {
            fallback: Some(ChatResponse {
                text: text.into(),
                tokens,
            }),
            ..Self::default()
        }
    }

    pub fn reply(text: &str, tokens: u64) -> Result<ChatResponse> {
        Ok(ChatResponse {
            text: text.into(),
            tokens,
        })
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("mock lock").clone()
    }

    pub fn attempts(&self) -> usize {
        self.requests.lock().expect("mock lock").len()
    }
}

impl ChatTransport for MockTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse> {
        self.requests.lock().expect("mock lock").push(request.clone());
        match self.script.lock().expect("mock lock").pop_front() {
            Some(r) => r,
            None => self
                .fallback
                .clone()
                .ok_or_else(|| Error::Backend("mock script exhausted".into())),
        }
    }
}

/// Sends with up to `max_retries` retries on backend errors, sleeping the
/// endpoint's backoff in between. Counts as one logical call however many
/// attempts it takes.
pub fn call_with_retry(
    transport: &dyn ChatTransport,
    request: &ChatRequest,
    endpoint: &BackendEndpoint,
    sleep: &(dyn Fn(Duration) + Sync),
) -> Result<ChatResponse> {
    let mut attempt = 0;
    loop {
        match transport.send(request) {
            Err(Error::Backend(_)) if attempt < endpoint.max_retries => {
                sleep(endpoint.backoff(attempt));
                attempt += 1;
            }
            Err(Error::Backend(m)) => {
                return Err(Error::Backend(format!("giving up after {} attempts: {m}", attempt + 1)))
            }
            other => return other,
        }
    }
}
