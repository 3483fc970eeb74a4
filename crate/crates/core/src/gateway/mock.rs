use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::GatewayError;

fn ok_status() -> u16 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockReply {
    #[serde(default = "ok_status")]
    pub status: u16,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub delay_ms: u64,
}

impl MockReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self { status: 200, text: text.into(), delay_ms: 0 }
    }

    pub fn status(status: u16) -> Self {
        Self { status, text: String::new(), delay_ms: 0 }
    }
}

/// Replies served in order to requests whose joined message text matches
/// `pattern`; the last reply repeats once the list runs out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub pattern: String,
    pub replies: Vec<MockReply>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn always(text: impl Into<String>) -> Self {
        Self { rules: vec![MockRule { pattern: ".*".into(), replies: vec![MockReply::text(text)] }] }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }
}

struct CompiledRule {
    regex: Regex,
    replies: Vec<MockReply>,
    served: AtomicUsize,
}

#[derive(Default)]
struct Counters {
    requests: AtomicUsize,
    inflight: AtomicUsize,
    peak: AtomicUsize,
    seen: Mutex<Vec<String>>,
}

/// In-process chat endpoint speaking the same wire shape as the client.
pub struct MockServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    accept: Option<JoinHandle<()>>,
    counters: Arc<Counters>,
}

/// Starts a mock endpoint on 127.0.0.1; port 0 picks a free port.
pub fn serve_mock(script: MockScript, port: u16) -> Result<MockServer, GatewayError> {
    let rules = script
        .rules
        .into_iter()
        .map(|r| {
            if r.replies.is_empty() {
                return Err(GatewayError::Config(format!("mock rule {:?} has no replies", r.pattern)));
            }
            let regex = Regex::new(&format!("(?s){}", r.pattern))
                .map_err(|e| GatewayError::Config(format!("mock pattern {:?}: {e}", r.pattern)))?;
            Ok(CompiledRule { regex, replies: r.replies, served: AtomicUsize::new(0) })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rules = Arc::new(rules);
    let server = tiny_http::Server::http(("127.0.0.1", port)).map_err(|e| GatewayError::Bind { port, detail: e.to_string() })?;
    let addr = server.server_addr().to_ip().ok_or_else(|| GatewayError::Bind { port, detail: "not an IP socket".into() })?;
    let server = Arc::new(server);
    let counters = Arc::new(Counters::default());

    let accept = {
        let server = Arc::clone(&server);
        let counters = Arc::clone(&counters);
        std::thread::spawn(move || {
            let mut workers = Vec::new();
            for request in server.incoming_requests() {
                let rules = Arc::clone(&rules);
                let counters = Arc::clone(&counters);
                workers.push(std::thread::spawn(move || handle(request, &rules, &counters)));
            }
            for w in workers {
                let _ = w.join();
            }
        })
    };
    Ok(MockServer { addr, server, accept: Some(accept), counters })
}

fn respond(request: tiny_http::Request, status: u16, body: &Value) {
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let response = tiny_http::Response::from_string(body.to_string()).with_status_code(status).with_header(header);
    let _ = request.respond(response);
}

fn handle(mut request: tiny_http::Request, rules: &[CompiledRule], counters: &Counters) {
    counters.requests.fetch_add(1, Ordering::SeqCst);
    let now = counters.inflight.fetch_add(1, Ordering::SeqCst) + 1;
    counters.peak.fetch_max(now, Ordering::SeqCst);

    let mut body = String::new();
    let parsed: Option<Value> = request.as_reader().read_to_string(&mut body).ok().and_then(|_| serde_json::from_str(&body).ok());
    let joined = parsed
        .as_ref()
        .and_then(|v| v.get("messages"))
        .and_then(Value::as_array)
        .map(|m| m.iter().filter_map(|x| x.get("content").and_then(Value::as_str)).collect::<Vec<_>>().join("\n"));

    match joined {
        None => respond(request, 400, &json!({ "error": { "message": "expected a JSON body with messages" } })),
        Some(text) => {
            counters.seen.lock().expect("mock log").push(text.clone());
            match rules.iter().find(|r| r.regex.is_match(&text)) {
                None => respond(request, 404, &json!({ "error": { "message": "no mock rule matched" } })),
                Some(rule) => {
                    let i = rule.served.fetch_add(1, Ordering::SeqCst).min(rule.replies.len() - 1);
                    let reply = &rule.replies[i];
                    if reply.delay_ms > 0 {
                        std::thread::sleep(Duration::from_millis(reply.delay_ms));
                    }
                    if reply.status == 200 {
                        let words = reply.text.split_whitespace().count() as u64;
                        respond(
                            request,
                            200,
                            &json!({
                                "object": "chat.completion",
                                "choices": [{ "index": 0, "message": { "role": "assistant", "content": reply.text }, "finish_reason": "stop" }],
                                "usage": { "prompt_tokens": text.split_whitespace().count(), "completion_tokens": words },
                            }),
                        );
                    } else {
                        respond(request, reply.status, &json!({ "error": { "message": reply.text } }));
                    }
                }
            }
        }
    }
    counters.inflight.fetch_sub(1, Ordering::SeqCst);
}

impl MockServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn requests(&self) -> usize {
        self.counters.requests.load(Ordering::SeqCst)
    }

    pub fn max_concurrent(&self) -> usize {
        self.counters.peak.load(Ordering::SeqCst)
    }

    /// Joined message text of every request received, in arrival order.
    pub fn seen(&self) -> Vec<String> {
        self.counters.seen.lock().expect("mock log").clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}
