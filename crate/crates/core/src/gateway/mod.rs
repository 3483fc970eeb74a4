//! Chat-completions transport with retries, an in-flight bound and
//! record/replay cassettes.

mod cassette;
mod mock;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cassette::{Cassette, CassetteRecorder, ChatExchange};
pub use mock::{serve_mock, MockReply, MockRule, MockScript, MockServer};

use crate::scenario::{GatewayConfig, GatewayMode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    /// Digest of the request with whitespace runs collapsed.
    pub fn request_hash(&self) -> String {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| json!({ "role": m.role, "content": m.content.split_whitespace().collect::<Vec<_>>().join(" ") }))
            .collect();
        let normalized = json!({ "model": self.model, "temperature": self.temperature, "messages": messages });
        hex::encode(Sha256::digest(serde_json::to_vec(&normalized).expect("json encodes")))
    }

    /// All message contents joined by newlines.
    pub fn joined_content(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("request {hash} is not in the cassette")]
    ReplayMiss { hash: String },
    #[error("transport failure after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("endpoint rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("unreadable endpoint reply: {0}")]
    Decode(String),
    #[error("cassette {path}: {detail}")]
    Cassette { path: String, detail: String },
    #[error("cannot bind mock endpoint on port {port}: {detail}")]
    Bind { port: u16, detail: String },
    #[error("gateway configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallStats {
    pub attempts: u32,
    pub backoffs: u32,
    pub latency_ms: u64,
    pub from_cassette: bool,
}

/// Counting semaphore that also remembers its peak occupancy.
#[derive(Debug)]
struct InflightLimit {
    bound: usize,
    current: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

struct Permit<'a>(&'a InflightLimit);

impl InflightLimit {
    fn new(bound: usize) -> Self {
        Self { bound: bound.max(1), current: Mutex::new(0), freed: Condvar::new(), peak: AtomicUsize::new(0) }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().expect("limit lock");
        while *n >= self.bound {
            n = self.freed.wait(n).expect("limit lock");
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::SeqCst);
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.current.lock().expect("limit lock") -= 1;
        self.0.freed.notify_one();
    }
}

enum Store {
    None,
    Replay(Cassette),
    Record(CassetteRecorder),
}

pub struct LlmGateway {
    config: GatewayConfig,
    store: Store,
    agent: ureq::Agent,
    network_calls: AtomicU64,
    limit: InflightLimit,
}

impl std::fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmGateway").field("mode", &self.config.mode).field("endpoint", &self.config.endpoint_url).finish()
    }
}

fn is_retryable(status: u16) -> bool {
    status == 429 || status >= 500
}

impl LlmGateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        let cassette_path =
            || config.cassette_path.clone().ok_or_else(|| GatewayError::Config(format!("{:?} mode needs a cassette path", config.mode)));
        let store = match config.mode {
            GatewayMode::Live => Store::None,
            GatewayMode::Replay => Store::Replay(Cassette::load(&cassette_path()?)?),
            GatewayMode::Record => Store::Record(CassetteRecorder::open(&cassette_path()?)?),
        };
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs_f64(config.timeout_sec)).build();
        let limit = InflightLimit::new(config.parallelism_bound);
        Ok(Self { config, store, agent, network_calls: AtomicU64::new(0), limit })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest { model: self.config.model_name.clone(), temperature: self.config.temperature, messages }
    }

    /// HTTP attempts made so far, retries included.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn max_inflight_observed(&self) -> usize {
        self.limit.peak.load(Ordering::SeqCst)
    }

    /// Content digest of the replay cassette.
    pub fn cassette_id(&self) -> Option<String> {
        match &self.store {
            Store::Replay(c) => Some(c.id().to_string()),
            _ => None,
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.complete_with_stats(request).map(|(r, _)| r)
    }

    pub fn complete_with_stats(&self, request: &ChatRequest) -> Result<(ChatResponse, CallStats), GatewayError> {
        match &self.store {
            Store::Replay(cassette) => {
                let hash = request.request_hash();
                let response = cassette.get(&hash).cloned().ok_or(GatewayError::ReplayMiss { hash })?;
                Ok((response, CallStats { from_cassette: true, ..Default::default() }))
            }
            Store::Record(recorder) => {
                let hash = request.request_hash();
                if let Some(hit) = recorder.get(&hash) {
                    return Ok((hit, CallStats { from_cassette: true, ..Default::default() }));
                }
                let (response, stats) = self.live(request)?;
                recorder.append(ChatExchange { request_hash: hash, request: request.clone(), response: response.clone() })?;
                Ok((response, stats))
            }
            Store::None => self.live(request),
        }
    }

    fn live(&self, request: &ChatRequest) -> Result<(ChatResponse, CallStats), GatewayError> {
        let _permit = self.limit.acquire();
        let started = Instant::now();
        let body = json!({
            "model": request.model,
            "temperature": request.temperature,
            "messages": request.messages,
        })
        .to_string();
        let api_key = std::env::var(&self.config.api_key_env_var_name).ok();
        let mut stats = CallStats::default();
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            stats.attempts += 1;
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let mut call = self.agent.post(&self.config.endpoint_url).set("Content-Type", "application/json");
            if let Some(key) = &api_key {
                call = call.set("Authorization", &format!("Bearer {key}"));
            }
            match call.send_string(&body) {
                Ok(reply) => {
                    let text = reply.into_string().map_err(|e| GatewayError::Decode(e.to_string()))?;
                    let value: Value = serde_json::from_str(&text).map_err(|e| GatewayError::Decode(e.to_string()))?;
                    let mut response = decode_reply(&value)?;
                    stats.latency_ms = started.elapsed().as_millis() as u64;
                    response.latency_ms = stats.latency_ms;
                    return Ok((response, stats));
                }
                Err(ureq::Error::Status(status, reply)) if is_retryable(status) => {
                    last_error = format!("status {status}: {}", reply.into_string().unwrap_or_default());
                }
                Err(ureq::Error::Status(status, reply)) => {
                    return Err(GatewayError::Rejected { status, body: reply.into_string().unwrap_or_default() });
                }
                Err(ureq::Error::Transport(t)) => last_error = t.to_string(),
            }
            if attempt < self.config.max_retries {
                let wait = self.config.backoff_base_ms.saturating_mul(1u64 << attempt.min(20));
                std::thread::sleep(Duration::from_millis(wait));
                stats.backoffs += 1;
            }
        }
        Err(GatewayError::Transport { attempts: stats.attempts, detail: last_error })
    }
}

/// Reads `choices[0].message.content` and the optional usage block.
pub fn decode_reply(value: &Value) -> Result<ChatResponse, GatewayError> {
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::Decode("missing choices[0].message.content".into()))?;
    Ok(ChatResponse {
        text: text.to_string(),
        prompt_tokens: value.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
        completion_tokens: value.pointer("/usage/completion_tokens").and_then(Value::as_u64),
        latency_ms: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str) -> ChatRequest {
        ChatRequest { model: "m".into(), temperature: 0.0, messages: vec![ChatMessage::user(text)] }
    }

    #[test]
    fn hash_ignores_whitespace_layout() {
        assert_eq!(req("a  b\r\n c").request_hash(), req("a b c").request_hash());
        assert_ne!(req("a b").request_hash(), req("ab").request_hash());
        assert_eq!(req("x").request_hash().len(), 64);
    }

    #[test]
    fn decodes_chat_reply() {
        let v = json!({"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}});
        let r = decode_reply(&v).unwrap();
        assert_eq!((r.text.as_str(), r.prompt_tokens, r.completion_tokens), ("hi", Some(3), Some(1)));
        assert!(matches!(decode_reply(&json!({"choices":[]})), Err(GatewayError::Decode(_))));
    }
}
