//! Chat-completions wire protocol shared by the remote checker, the codifier
//! and the remote predictor/judge.
//!
//! Requests are OpenAI-compatible: `{model, messages, temperature, logprobs?,
//! top_logprobs?, max_tokens?}` POSTed to `<endpoint>/chat/completions`.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const ENV_ENDPOINT: &str = "CHECKER_ENDPOINT";
pub const ENV_API_KEY: &str = "CHECKER_API_KEY";
pub const ENV_MODEL: &str = "CHECKER_MODEL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// Ask for token log-probabilities (with this many alternatives).
    pub top_logprobs: Option<u8>,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            messages,
            temperature: 0.0,
            top_logprobs: None,
            max_tokens: None,
        }
    }

    pub fn to_wire(&self, model: &str) -> Value {
        let mut body = json!({
            "model": model,
            "messages": self.messages,
            "temperature": self.temperature,
        });
        if let Some(top) = self.top_logprobs {
            body["logprobs"] = Value::Bool(true);
            body["top_logprobs"] = json!(top);
        }
        if let Some(max) = self.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChatCompletion {
    pub content: String,
    /// Empty when the backend did not return log-probabilities.
    pub tokens: Vec<TokenLogprob>,
}

impl ChatCompletion {
    pub fn text(content: impl Into<String>) -> Self {
        ChatCompletion {
            content: content.into(),
            tokens: Vec::new(),
        }
    }

    pub fn from_wire(body: &Value) -> Result<Self, ClientError> {
        let choice = body
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| ClientError::Protocol("response has no choices".into()))?;
        let content = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ClientError::Protocol("choice has no message content".into()))?
            .to_string();
        let mut tokens = Vec::new();
        if let Some(items) = choice.pointer("/logprobs/content").and_then(Value::as_array) {
            for item in items {
                let (Some(token), Some(logprob)) = (
                    item.get("token").and_then(Value::as_str),
                    item.get("logprob").and_then(Value::as_f64),
                ) else {
                    continue;
                };
                let top = item
                    .get("top_logprobs")
                    .and_then(Value::as_array)
                    .map(|alts| {
                        alts.iter()
                            .filter_map(|a| {
                                Some((
                                    a.get("token")?.as_str()?.to_string(),
                                    a.get("logprob")?.as_f64()?,
                                ))
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                tokens.push(TokenLogprob {
                    token: token.to_string(),
                    logprob,
                    top,
                });
            }
        }
        Ok(ChatCompletion { content, tokens })
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed after {attempts} attempt(s): {message}")]
    Exhausted { attempts: u32, message: String },
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("canned client has no responses left")]
    ScriptExhausted,
    #[error("client configuration: {0}")]
    Config(String),
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatCompletion, ClientError>;

    /// Model name (or fixture name), used in cache keys and reports.
    fn model_name(&self) -> String;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, request: &ChatRequest) -> Result<ChatCompletion, ClientError> {
        (**self).complete(request)
    }
    fn model_name(&self) -> String {
        (**self).model_name()
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatCompletion, ClientError> {
        (**self).complete(request)
    }
    fn model_name(&self) -> String {
        (**self).model_name()
    }
}

/// Failure from a single POST.
#[derive(Debug, Clone)]
pub struct TransportError {
    pub retryable: bool,
    pub message: String,
}

pub trait Transport: Send + Sync {
    fn post_json(&self, body: &Value) -> Result<Value, TransportError>;
}

pub struct HttpTransport {
    url: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(HttpTransport {
            url: chat_url(endpoint),
            api_key,
            http,
        })
    }
}

fn chat_url(endpoint: &str) -> String {
    let trimmed = endpoint.trim_end_matches('/');
    if trimmed.ends_with("/chat/completions") {
        trimmed.to_string()
    } else {
        format!("{trimmed}/chat/completions")
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, body: &Value) -> Result<Value, TransportError> {
        let mut req = self.http.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError {
            retryable: true,
            message: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(TransportError {
                retryable: status.is_server_error() || status.as_u16() == 429,
                message: format!("HTTP {status}: {text}"),
            });
        }
        resp.json::<Value>().map_err(|e| TransportError {
            retryable: false,
            message: format!("invalid JSON body: {e}"),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: None,
            api_key: None,
            model: None,
            max_attempts: 3,
            initial_backoff_ms: 250,
            max_backoff_ms: 8_000,
            max_in_flight: 8,
            timeout_secs: 60,
        }
    }
}

impl ClientConfig {
    /// Fills unset endpoint/key/model from the environment.
    pub fn with_env_fallback(mut self) -> Self {
        let env = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        self.endpoint = self.endpoint.or_else(|| env(ENV_ENDPOINT));
        self.api_key = self.api_key.or_else(|| env(ENV_API_KEY));
        self.model = self.model.or_else(|| env(ENV_MODEL));
        self
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(
            self.initial_backoff_ms
                .saturating_mul(factor)
                .min(self.max_backoff_ms),
        )
    }
}

/// Counting semaphore capping concurrent requests.
struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(cap: usize) -> Self {
        InFlight {
            cap: cap.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Chat client over any [`Transport`], with bounded exponential-backoff retry.
pub struct RemoteChatClient<T = HttpTransport> {
    transport: T,
    config: ClientConfig,
    model: String,
    in_flight: InFlight,
}

impl RemoteChatClient<HttpTransport> {
    pub fn from_config(config: ClientConfig) -> Result<Self, ClientError> {
        let config = config.with_env_fallback();
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| ClientError::Config(format!("no endpoint (set {ENV_ENDPOINT})")))?;
        let transport = HttpTransport::new(
            &endpoint,
            config.api_key.clone(),
            Duration::from_secs(config.timeout_secs),
        )?;
        Ok(Self::with_transport(transport, config))
    }
}

impl<T: Transport> RemoteChatClient<T> {
    pub fn with_transport(transport: T, config: ClientConfig) -> Self {
        let model = config.model.clone().unwrap_or_else(|| "default".into());
        let in_flight = InFlight::new(config.max_in_flight);
        RemoteChatClient {
            transport,
            config,
            model,
            in_flight,
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }
}

impl<T: Transport> ChatClient for RemoteChatClient<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatCompletion, ClientError> {
        let body = request.to_wire(&self.model);
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            let result = {
                let _slot = self.in_flight.acquire();
                self.transport.post_json(&body)
            };
            match result {
                Ok(value) => return ChatCompletion::from_wire(&value),
                Err(e) if !e.retryable => return Err(ClientError::Rejected(e.message)),
                Err(e) => {
                    log::warn!("chat request attempt {attempt}/{attempts} failed: {}", e.message);
                    last = e.message;
                    if attempt < attempts {
                        std::thread::sleep(self.config.backoff(attempt));
                    }
                }
            }
        }
        Err(ClientError::Exhausted {
            attempts,
            message: last,
        })
    }

    fn model_name(&self) -> String {
        self.model.clone()
    }
}

/// Replays a fixed list of responses, one per request, and records requests.
#[derive(Default)]
pub struct CannedClient {
    responses: Mutex<VecDeque<String>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl CannedClient {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CannedClient {
            responses: Mutex::new(responses.into_iter().map(Into::into).collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Fixture format: a JSON list of response strings.
    pub fn from_fixture(text: &str) -> Result<Self, ClientError> {
        let responses: Vec<String> = serde_json::from_str(text)
            .map_err(|e| ClientError::Config(format!("canned fixture: {e}")))?;
        Ok(Self::new(responses))
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.responses.lock().unwrap().len()
    }
}

impl ChatClient for CannedClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatCompletion, ClientError> {
        self.requests.lock().unwrap().push(request.clone());
        self.responses
            .lock()
            .unwrap()
            .pop_front()
            .map(ChatCompletion::text)
            .ok_or(ClientError::ScriptExhausted)
    }

    fn model_name(&self) -> String {
        "canned".into()
    }
}
