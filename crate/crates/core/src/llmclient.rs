//! Chat-with-tools transport: an OpenAI-compatible HTTP backend, a
//! deterministic replay backend, and a recorder that turns any live session
//! into a replayable JSON-lines file.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unparseable provider response: {0}")]
    Parse(String),
    #[error("replay mismatch at exchange {index}: expected fingerprint {expected}, got {found}")]
    ReplayMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("replay script exhausted after {len} exchanges")]
    ReplayExhausted { len: usize },
    #[error("environment variable {0} with the API key is not set")]
    MissingApiKey(String),
    #[error("request has no messages")]
    EmptyRequest,
    #[error("recording i/o failure: {0}")]
    Io(String),
}

impl LlmError {
    /// Errors worth retrying with backoff.
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    #[serde(default)]
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub arguments: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
            tool_call: None,
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Counts were estimated locally because the provider reported none.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub estimated: bool,
}

impl TokenUsage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        TokenUsage {
            input_tokens,
            output_tokens,
            estimated: false,
        }
    }

    pub fn add(&mut self, other: &TokenUsage) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.estimated |= other.estimated;
    }

    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatExchange {
    pub request: Vec<Message>,
    pub response: ChatResponse,
    pub usage: TokenUsage,
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: Some(0.0),
            top_p: Some(1.0),
            max_tokens: Some(4096),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    HttpApi,
    Replay,
}

pub trait LlmBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn kind(&self) -> BackendKind;
    /// Whether tool schemas are forwarded as structured tool definitions.
    fn supports_tools(&self) -> bool {
        false
    }
    fn complete(&self, messages: &[Message], tools: &[ToolSchema]) -> Result<ChatExchange, LlmError>;
}

/// Rough tokenizer-free estimate: one token per four characters.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Hash of the role-tagged message texts, insensitive to whitespace-only
/// differences.
pub fn fingerprint(messages: &[Message]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(m.role.as_str().as_bytes());
        hasher.update([0x1f]);
        hasher.update(collapse_whitespace(&m.content).as_bytes());
        if let Some(call) = &m.tool_call {
            hasher.update([0x1f]);
            hasher.update(call.name.as_bytes());
            hasher.update(collapse_whitespace(&call.arguments.to_string()).as_bytes());
        }
        hasher.update([0x1e]);
    }
    hex::encode(hasher.finalize())
}

/// One line of a recording file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedExchange {
    /// `None` accepts any request; hand-written scripts start this way.
    #[serde(default)]
    pub fingerprint: Option<String>,
    pub response: ChatResponse,
    #[serde(default)]
    pub usage: TokenUsage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

pub fn parse_recording(text: &str) -> Result<Vec<RecordedExchange>, LlmError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LlmError::Parse(format!("recording line {}: {e}", i + 1)))
        })
        .collect()
}

/// Serves scripted exchanges in order; never touches the network.
#[derive(Debug)]
pub struct ReplayBackend {
    model_id: String,
    script: Vec<RecordedExchange>,
    cursor: Mutex<usize>,
    check_fingerprints: bool,
    simulate_latency: bool,
}

impl ReplayBackend {
    pub fn new(model_id: &str, script: Vec<RecordedExchange>) -> Self {
        ReplayBackend {
            model_id: model_id.to_string(),
            script,
            cursor: Mutex::new(0),
            check_fingerprints: true,
            simulate_latency: true,
        }
    }

    pub fn from_jsonl(model_id: &str, text: &str) -> Result<Self, LlmError> {
        Ok(Self::new(model_id, parse_recording(text)?))
    }

    pub fn load(model_id: &str, path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(model_id, &text)
    }

    /// Skip fingerprint checks, e.g. when re-recording edited scripts.
    pub fn lenient(mut self) -> Self {
        self.check_fingerprints = false;
        self
    }

    /// Return immediately instead of sleeping for recorded latencies.
    pub fn without_latency(mut self) -> Self {
        self.simulate_latency = false;
        self
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.script.len() - *self.cursor.lock().unwrap()
    }
}

impl LlmBackend for ReplayBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn supports_tools(&self) -> bool {
        true
    }

    fn complete(&self, messages: &[Message], _tools: &[ToolSchema]) -> Result<ChatExchange, LlmError> {
        if messages.is_empty() {
            return Err(LlmError::EmptyRequest);
        }
        let mut cursor = self.cursor.lock().unwrap();
        let index = *cursor;
        let entry = self.script.get(index).ok_or(LlmError::ReplayExhausted {
            len: self.script.len(),
        })?;
        if self.check_fingerprints {
            if let Some(expected) = &entry.fingerprint {
                let found = fingerprint(messages);
                if &found != expected {
                    return Err(LlmError::ReplayMismatch {
                        index,
                        expected: expected.clone(),
                        found,
                    });
                }
            }
        }
        *cursor += 1;
        drop(cursor);
        if self.simulate_latency {
            if let Some(ms) = entry.latency_ms {
                std::thread::sleep(Duration::from_millis(ms));
            }
        }
        Ok(ChatExchange {
            request: messages.to_vec(),
            response: entry.response.clone(),
            usage: entry.usage,
            latency_ms: entry.latency_ms,
        })
    }
}

/// Wraps a backend and appends every successful exchange to `sink` as a
/// fingerprinted recording line.
pub struct RecordingBackend<B> {
    inner: B,
    sink: Mutex<Box<dyn Write + Send>>,
}

pub fn record_session<B: LlmBackend>(backend: B, sink: Box<dyn Write + Send>) -> RecordingBackend<B> {
    RecordingBackend {
        inner: backend,
        sink: Mutex::new(sink),
    }
}

impl<B: LlmBackend> RecordingBackend<B> {
    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: LlmBackend> LlmBackend for RecordingBackend<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn supports_tools(&self) -> bool {
        self.inner.supports_tools()
    }

    fn complete(&self, messages: &[Message], tools: &[ToolSchema]) -> Result<ChatExchange, LlmError> {
        let exchange = self.inner.complete(messages, tools)?;
        let line = RecordedExchange {
            fingerprint: Some(fingerprint(messages)),
            response: exchange.response.clone(),
            usage: exchange.usage,
            latency_ms: exchange.latency_ms,
        };
        let mut sink = self.sink.lock().unwrap();
        let text = serde_json::to_string(&line).map_err(|e| LlmError::Io(e.to_string()))?;
        writeln!(sink, "{text}")
            .and_then(|_| sink.flush())
            .map_err(|e| LlmError::Io(e.to_string()))?;
        Ok(exchange)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub model_id: String,
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub supports_tools: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| LlmError::MissingApiKey(var.clone()))?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            config,
            api_key,
            agent,
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }
}

/// Builds an OpenAI-style chat completions request body.
pub fn build_request_body(
    model_id: &str,
    sampling: &Sampling,
    messages: &[Message],
    tools: Option<&[ToolSchema]>,
) -> Value {
    let msgs: Vec<Value> = messages
        .iter()
        .map(|m| {
            let mut v = json!({"role": m.role.as_str(), "content": m.content});
            if let Some(call) = &m.tool_call {
                v["tool_calls"] = json!([{
                    "id": call.id,
                    "type": "function",
                    "function": {"name": call.name, "arguments": call.arguments.to_string()},
                }]);
            }
            if let Some(id) = &m.tool_call_id {
                v["tool_call_id"] = json!(id);
            }
            v
        })
        .collect();
    let mut body = json!({"model": model_id, "messages": msgs});
    if let Some(t) = sampling.temperature {
        body["temperature"] = json!(t);
    }
    if let Some(p) = sampling.top_p {
        body["top_p"] = json!(p);
    }
    if let Some(n) = sampling.max_tokens {
        body["max_tokens"] = json!(n);
    }
    if let Some(tools) = tools.filter(|t| !t.is_empty()) {
        body["tools"] = tools
            .iter()
            .map(|t| {
                json!({"type": "function", "function": {
                    "name": t.name, "description": t.description, "parameters": t.parameters,
                }})
            })
            .collect();
    }
    body
}

/// Extracts the reply and token usage from a chat completions response.
/// Missing usage blocks are replaced by flagged estimates.
pub fn parse_response_body(
    body: &Value,
    request: &[Message],
) -> Result<(ChatResponse, TokenUsage), LlmError> {
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| LlmError::Parse("missing choices[0].message".into()))?;
    let text = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let tool_call = match message.pointer("/tool_calls/0") {
        Some(call) => {
            let name = call
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| LlmError::Parse("tool call without a function name".into()))?;
            let arguments = match call.pointer("/function/arguments") {
                Some(Value::String(s)) if s.trim().is_empty() => json!({}),
                Some(Value::String(s)) => serde_json::from_str(s)
                    .map_err(|e| LlmError::Parse(format!("tool arguments: {e}")))?,
                Some(other) => other.clone(),
                None => json!({}),
            };
            Some(ToolCall {
                id: call.get("id").and_then(Value::as_str).unwrap_or_default().to_string(),
                name: name.to_string(),
                arguments,
            })
        }
        None => None,
    };
    if text.is_empty() && tool_call.is_none() {
        return Err(LlmError::Parse("empty response".into()));
    }
    let reported = body.get("usage").and_then(|u| {
        Some(TokenUsage::new(
            u.get("prompt_tokens")?.as_u64()?,
            u.get("completion_tokens")?.as_u64()?,
        ))
    });
    let usage = reported.unwrap_or_else(|| {
        let input: u64 = request.iter().map(|m| estimate_tokens(&m.content)).sum();
        let mut output = estimate_tokens(&text);
        if let Some(call) = &tool_call {
            output += estimate_tokens(&call.name) + estimate_tokens(&call.arguments.to_string());
        }
        TokenUsage {
            input_tokens: input,
            output_tokens: output,
            estimated: true,
        }
    });
    Ok((ChatResponse { text, tool_call }, usage))
}

impl LlmBackend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::HttpApi
    }

    fn supports_tools(&self) -> bool {
        self.config.supports_tools
    }

    fn complete(&self, messages: &[Message], tools: &[ToolSchema]) -> Result<ChatExchange, LlmError> {
        if messages.is_empty() {
            return Err(LlmError::EmptyRequest);
        }
        let tools = self.config.supports_tools.then_some(tools);
        let body = build_request_body(&self.config.model_id, &self.config.sampling, messages, tools);
        let started = Instant::now();
        let mut request = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send(body.to_string())
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status { status, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| LlmError::Parse(e.to_string()))?;
        let (response, usage) = parse_response_body(&value, messages)?;
        Ok(ChatExchange {
            request: messages.to_vec(),
            response,
            usage,
            latency_ms: Some(started.elapsed().as_millis() as u64),
        })
    }
}
