use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, ChatResponse, GatewayError};

/// One line of a cassette file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request_hash: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

fn cassette_err(path: &Path, detail: impl ToString) -> GatewayError {
    GatewayError::Cassette { path: path.display().to_string(), detail: detail.to_string() }
}

fn parse_lines(path: &Path, text: &str) -> Result<Vec<ChatExchange>, GatewayError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| cassette_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Read-only request-hash index over a recorded session. The first exchange
/// wins when a hash repeats.
#[derive(Debug, Clone)]
pub struct Cassette {
    entries: HashMap<String, ChatResponse>,
    id: String,
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let bytes = std::fs::read(path).map_err(|e| cassette_err(path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| cassette_err(path, e))?;
        let mut entries = HashMap::new();
        for ex in parse_lines(path, &text)? {
            entries.entry(ex.request_hash).or_insert(ex.response);
        }
        Ok(Self { entries, id: hex::encode(Sha256::digest(&bytes)) })
    }

    pub fn get(&self, hash: &str) -> Option<&ChatResponse> {
        self.entries.get(hash)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

/// Single appender for record mode. Exchanges already in the file are served
/// without a new call.
#[derive(Debug)]
pub struct CassetteRecorder {
    path: PathBuf,
    inner: Mutex<(File, HashMap<String, ChatResponse>)>,
}

impl CassetteRecorder {
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let mut known = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| cassette_err(path, e))?;
            for ex in parse_lines(path, &text)? {
                known.entry(ex.request_hash).or_insert(ex.response);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| cassette_err(path, e))?;
        Ok(Self { path: path.to_path_buf(), inner: Mutex::new((file, known)) })
    }

    pub fn get(&self, hash: &str) -> Option<ChatResponse> {
        self.inner.lock().expect("recorder lock").1.get(hash).cloned()
    }

    pub fn append(&self, exchange: ChatExchange) -> Result<(), GatewayError> {
        let mut guard = self.inner.lock().expect("recorder lock");
        if guard.1.contains_key(&exchange.request_hash) {
            return Ok(());
        }
        let mut line = serde_json::to_string(&exchange).map_err(|e| cassette_err(&self.path, e))?;
        line.push('\n');
        guard.0.write_all(line.as_bytes()).map_err(|e| cassette_err(&self.path, e))?;
        guard.0.flush().map_err(|e| cassette_err(&self.path, e))?;
        guard.1.insert(exchange.request_hash, exchange.response);
        Ok(())
    }
}
