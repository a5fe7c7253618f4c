//! Blocking chat-completions client shared by the remote judge, the remote
//! agent policy, and the remote embedder.
//!
//! Transient failures (connect errors, timeouts, 5xx, 429) are retried with
//! exponential backoff; auth rejections fail immediately. A configurable
//! in-flight cap bounds concurrent requests across worker threads. Auth
//! tokens are resolved from a named environment variable at construction
//! and never logged.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How transient failures are retried: `max_attempts` total tries, sleeping
/// `initial_backoff * backoff_factor^(attempt-1)` between them.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let factor = self.backoff_factor.powi(attempt.saturating_sub(1) as i32);
        self.initial_backoff.mul_f64(factor)
    }
}

#[derive(Debug, Clone)]
pub struct ChatClientConfig {
    /// Service root; `/chat/completions` and `/embeddings` are joined onto it.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if the
    /// endpoint needs one. The token itself never appears in config or logs.
    pub auth_env: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub temperature: f64,
    pub max_tokens: u64,
}

impl ChatClientConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        ChatClientConfig {
            base_url: base_url.into(),
            model: model.into(),
            auth_env: None,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            temperature: 0.0,
            max_tokens: 4096,
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid client configuration: {0}")]
    Config(String),
    #[error("authentication rejected by backend")]
    AuthRejected,
    #[error("rate limited after exhausting retry budget")]
    RateLimited,
    #[error("backend unavailable: {cause}")]
    BackendUnavailable { cause: String },
    #[error("backend response unusable: {0}")]
    InvalidResponse(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub text: String,
    pub completion_tokens: Option<u64>,
}

// Wire shapes -------------------------------------------------------------

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: AssistantMessage,
}

#[derive(Deserialize)]
struct AssistantMessage {
    content: String,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    completion_tokens: Option<u64>,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

// Client ------------------------------------------------------------------

/// Counting gate bounding concurrent requests.
struct InFlightGate {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate { permits: Mutex::new(limit), freed: Condvar::new() }
    }

    fn acquire(&self) -> InFlightPermit<'_> {
        let mut permits = self.permits.lock().expect("gate lock");
        while *permits == 0 {
            permits = self.freed.wait(permits).expect("gate wait");
        }
        *permits -= 1;
        InFlightPermit { gate: self }
    }
}

struct InFlightPermit<'a> {
    gate: &'a InFlightGate,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.gate.permits.lock().expect("gate lock") += 1;
        self.gate.freed.notify_one();
    }
}

pub struct ChatClient {
    http: reqwest::blocking::Client,
    config: ChatClientConfig,
    auth_token: Option<String>,
    gate: InFlightGate,
}

impl ChatClient {
    /// Builds the client, resolving the auth token from the configured
    /// environment variable. A named-but-unset variable is a configuration
    /// error rather than a silent unauthenticated run.
    pub fn new(config: ChatClientConfig) -> Result<Self, ClientError> {
        if config.base_url.is_empty() {
            return Err(ClientError::Config("base_url must be non-empty".into()));
        }
        if config.max_in_flight == 0 {
            return Err(ClientError::Config("max_in_flight must be at least 1".into()));
        }
        if config.retry.max_attempts == 0 {
            return Err(ClientError::Config("retry.max_attempts must be at least 1".into()));
        }
        let auth_token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ClientError::Config(format!("auth environment variable '{var}' is not set"))
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        let gate = InFlightGate::new(config.max_in_flight);
        Ok(ChatClient { http, config, auth_token, gate })
    }

    pub fn model(&self) -> &str {
        &self.config.model
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// Sends one chat-completions request and returns the assistant text.
    pub fn chat_complete(&self, messages: &[ChatMessage]) -> Result<ChatReply, ClientError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        let response: ChatResponse = self.post_with_retry("chat/completions", &body)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ClientError::InvalidResponse("response carried no choices".into()))?;
        Ok(ChatReply {
            text: choice.message.content,
            completion_tokens: response.usage.and_then(|u| u.completion_tokens),
        })
    }

    /// Fetches one embedding vector from the companion endpoint.
    pub fn embed(&self, input: &str) -> Result<Vec<f64>, ClientError> {
        let body = EmbeddingRequest { model: &self.config.model, input };
        let response: EmbeddingResponse = self.post_with_retry("embeddings", &body)?;
        response
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| ClientError::InvalidResponse("response carried no embeddings".into()))
    }

    fn post_with_retry<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, ClientError> {
        let _permit = self.gate.acquire();
        let url = self.endpoint(path);
        let mut last_transient: Option<ClientError> = None;
        for attempt in 1..=self.config.retry.max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.config.retry.backoff(attempt - 1));
            }
            match self.post_once(&url, body) {
                Ok(parsed) => return Ok(parsed),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(e)) => {
                    log::debug!("POST {url} attempt {attempt} failed: {e}");
                    last_transient = Some(e);
                }
            }
        }
        Err(last_transient.expect("at least one attempt ran"))
    }

    fn post_once<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        url: &str,
        body: &B,
    ) -> Result<R, Attempt> {
        let mut req = self.http.post(url).json(body);
        if let Some(token) = &self.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            let cause = if e.is_timeout() {
                "request timed out".to_string()
            } else if e.is_connect() {
                format!("connection failed: {e}")
            } else {
                e.to_string()
            };
            Attempt::Transient(ClientError::BackendUnavailable { cause })
        })?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(Attempt::Fatal(ClientError::AuthRejected));
        }
        if status.as_u16() == 429 {
            return Err(Attempt::Transient(ClientError::RateLimited));
        }
        if status.is_server_error() {
            return Err(Attempt::Transient(ClientError::BackendUnavailable {
                cause: format!("HTTP {}", status.as_u16()),
            }));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(ClientError::BackendUnavailable {
                cause: format!("HTTP {}", status.as_u16()),
            }));
        }
        let text = resp.text().map_err(|e| {
            Attempt::Transient(ClientError::BackendUnavailable { cause: e.to_string() })
        })?;
        serde_json::from_str(&text).map_err(|e| {
            Attempt::Fatal(ClientError::InvalidResponse(format!(
                "could not parse response body: {e}"
            )))
        })
    }
}

enum Attempt {
    /// Retrying cannot help (auth, malformed 2xx body, permanent 4xx).
    Fatal(ClientError),
    Transient(ClientError),
}

// ---------------------------------------------------------------------------
// Test stub server
// ---------------------------------------------------------------------------
