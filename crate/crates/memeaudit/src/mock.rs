//! Scripted stand-in for a chat-completions + embeddings endpoint.
//!
//! Chat replies come from the first rule whose predicates all match the
//! request; predicates look at the prompt text and at the identity headers
//! the client sends. Rules can add latency and fail their first N matches
//! with a chosen status. Embeddings are a seeded SHA-256 expansion of the
//! input, unit-normalized.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::client::{OCCLUSION_HEADER, PROMPT_HEADER, SAMPLE_HEADER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Substring of the concatenated prompt text.
    #[serde(default)]
    pub prompt_contains: Option<String>,
    /// Sample id; `*` matches any run of characters.
    #[serde(default)]
    pub sample_id: Option<String>,
    /// Occlusion id (`none`, `occ3`, ...); `*` allowed.
    #[serde(default)]
    pub occlusion_id: Option<String>,
    #[serde(default)]
    pub prompt_id: Option<String>,
    pub response: String,
    #[serde(default)]
    pub latency_ms: u64,
    /// The first this-many matches fail with `fail_status`.
    #[serde(default)]
    pub fail_first: u32,
    #[serde(default = "default_fail_status")]
    pub fail_status: u16,
}

fn default_fail_status() -> u16 {
    429
}

fn default_dim() -> usize {
    64
}

impl MockRule {
    pub fn reply(response: &str) -> Self {
        MockRule {
            prompt_contains: None,
            sample_id: None,
            occlusion_id: None,
            prompt_id: None,
            response: response.into(),
            latency_ms: 0,
            fail_first: 0,
            fail_status: default_fail_status(),
        }
    }

    pub fn for_sample(mut self, pattern: &str) -> Self {
        self.sample_id = Some(pattern.into());
        self
    }

    pub fn for_occlusion(mut self, pattern: &str) -> Self {
        self.occlusion_id = Some(pattern.into());
        self
    }

    pub fn when_prompt_contains(mut self, needle: &str) -> Self {
        self.prompt_contains = Some(needle.into());
        self
    }

    pub fn failing_first(mut self, n: u32, status: u16) -> Self {
        self.fail_first = n;
        self.fail_status = status;
        self
    }

    pub fn with_latency(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }

    fn matches(&self, prompt: &str, sample: &str, occlusion: &str, prompt_id: &str) -> bool {
        self.prompt_contains.as_deref().is_none_or(|n| prompt.contains(n))
            && self.sample_id.as_deref().is_none_or(|p| glob(p, sample))
            && self.occlusion_id.as_deref().is_none_or(|p| glob(p, occlusion))
            && self.prompt_id.as_deref().is_none_or(|p| glob(p, prompt_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default_response: String,
    #[serde(default)]
    pub embedding_seed: u64,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

impl MockScript {
    pub fn new(default_response: &str) -> Self {
        MockScript {
            rules: Vec::new(),
            default_response: default_response.into(),
            embedding_seed: 0,
            embedding_dim: default_dim(),
        }
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("parsing {}: {e}", path.display()))
    }
}

/// `*` matches any (possibly empty) run; everything else is literal.
pub fn glob(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

/// Seeded hash expansion of `payload` to `dim` coordinates, unit-normalized.
pub fn mock_embedding(seed: u64, dim: usize, payload: &str) -> Vec<f64> {
    let mut v = Vec::with_capacity(dim);
    let mut block = 0u32;
    while v.len() < dim {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(block.to_le_bytes());
        h.update(payload.as_bytes());
        for chunk in h.finalize().chunks_exact(4) {
            if v.len() == dim {
                break;
            }
            let u = u32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            v.push(u as f64 / u32::MAX as f64 * 2.0 - 1.0);
        }
        block += 1;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

#[derive(Debug, Default)]
pub struct MockStats {
    pub chat_requests: AtomicU64,
    pub embed_requests: AtomicU64,
    pub bad_requests: AtomicU64,
    inflight: AtomicU64,
    pub max_inflight: AtomicU64,
}

impl MockStats {
    pub fn chat(&self) -> u64 {
        self.chat_requests.load(Ordering::SeqCst)
    }

    pub fn embed(&self) -> u64 {
        self.embed_requests.load(Ordering::SeqCst)
    }

    pub fn total(&self) -> u64 {
        self.chat() + self.embed() + self.bad_requests.load(Ordering::SeqCst)
    }

    pub fn peak_inflight(&self) -> u64 {
        self.max_inflight.load(Ordering::SeqCst)
    }
}

struct MockState {
    script: MockScript,
    budgets: Vec<AtomicU32>,
    stats: Arc<MockStats>,
}

struct InflightGuard<'a>(&'a MockStats);

impl<'a> InflightGuard<'a> {
    fn enter(stats: &'a MockStats) -> Self {
        let now = stats.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_inflight.fetch_max(now, Ordering::SeqCst);
        InflightGuard(stats)
    }
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        self.0.inflight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn bad_request(state: &MockState, message: String) -> Response {
    state.stats.bad_requests.fetch_add(1, Ordering::SeqCst);
    (
        StatusCode::BAD_REQUEST,
        Json(json!({"error": {"message": message, "type": "invalid_request_error"}})),
    )
        .into_response()
}

/// Concatenated text parts, or a diagnostic naming the first violation.
fn prompt_text(body: &Value) -> Result<(String, String), String> {
    let model = body
        .get("model")
        .and_then(Value::as_str)
        .ok_or("field 'model' must be a string")?
        .to_string();
    let messages = body
        .get("messages")
        .and_then(Value::as_array)
        .filter(|m| !m.is_empty())
        .ok_or("field 'messages' must be a non-empty array")?;
    let mut text = String::new();
    for (i, m) in messages.iter().enumerate() {
        m.get("role")
            .and_then(Value::as_str)
            .ok_or_else(|| format!("messages[{i}].role must be a string"))?;
        match m.get("content") {
            Some(Value::String(s)) => text.push_str(s),
            Some(Value::Array(parts)) => {
                for (j, part) in parts.iter().enumerate() {
                    match part.get("type").and_then(Value::as_str) {
                        Some("text") => text.push_str(
                            part.get("text")
                                .and_then(Value::as_str)
                                .ok_or_else(|| format!("messages[{i}].content[{j}].text must be a string"))?,
                        ),
                        Some("image_url") => {
                            part.pointer("/image_url/url")
                                .and_then(Value::as_str)
                                .ok_or_else(|| format!("messages[{i}].content[{j}].image_url.url must be a string"))?;
                        }
                        _ => return Err(format!("messages[{i}].content[{j}].type must be 'text' or 'image_url'")),
                    }
                }
            }
            _ => return Err(format!("messages[{i}].content must be a string or an array of parts")),
        }
    }
    Ok((model, text))
}

fn header<'a>(headers: &'a HeaderMap, name: &str, fallback: &'a str) -> &'a str {
    headers.get(name).and_then(|v| v.to_str().ok()).unwrap_or(fallback)
}

async fn handle_chat(State(state): State<Arc<MockState>>, headers: HeaderMap, body: Bytes) -> Response {
    let _guard = InflightGuard::enter(&state.stats);
    let parsed: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return bad_request(&state, format!("body is not JSON: {e}")),
    };
    let (model, prompt) = match prompt_text(&parsed) {
        Ok(p) => p,
        Err(e) => return bad_request(&state, e),
    };
    state.stats.chat_requests.fetch_add(1, Ordering::SeqCst);
    let sample = header(&headers, SAMPLE_HEADER, "");
    let occlusion = header(&headers, OCCLUSION_HEADER, "none");
    let prompt_id = header(&headers, PROMPT_HEADER, "");

    let matched = state
        .script
        .rules
        .iter()
        .enumerate()
        .find(|(_, r)| r.matches(&prompt, sample, occlusion, prompt_id));
    let text = match matched {
        Some((i, rule)) => {
            if rule.latency_ms > 0 {
                tokio::time::sleep(Duration::from_millis(rule.latency_ms)).await;
            }
            let failing = state.budgets[i]
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
                .is_ok();
            if failing {
                let status = StatusCode::from_u16(rule.fail_status).unwrap_or(StatusCode::SERVICE_UNAVAILABLE);
                return (status, Json(json!({"error": {"message": "scripted failure"}}))).into_response();
            }
            rule.response.clone()
        }
        None => state.script.default_response.clone(),
    };
    Json(json!({
        "id": "mock-chat",
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": "stop",
        }],
    }))
    .into_response()
}

async fn handle_embed(State(state): State<Arc<MockState>>, body: Bytes) -> Response {
    let _guard = InflightGuard::enter(&state.stats);
    let parsed: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return bad_request(&state, format!("body is not JSON: {e}")),
    };
    let Some(model) = parsed.get("model").and_then(Value::as_str) else {
        return bad_request(&state, "field 'model' must be a string".into());
    };
    let inputs: Vec<&str> = match parsed.get("input") {
        Some(Value::String(s)) => vec![s.as_str()],
        Some(Value::Array(items)) if !items.is_empty() => {
            match items.iter().map(Value::as_str).collect::<Option<Vec<_>>>() {
                Some(v) => v,
                None => return bad_request(&state, "field 'input' must hold strings".into()),
            }
        }
        _ => {
            return bad_request(
                &state,
                "field 'input' must be a string or a non-empty array of strings".into(),
            )
        }
    };
    state.stats.embed_requests.fetch_add(1, Ordering::SeqCst);
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            json!({
                "object": "embedding",
                "index": i,
                "embedding": mock_embedding(state.script.embedding_seed, state.script.embedding_dim, s),
            })
        })
        .collect();
    Json(json!({"object": "list", "model": model, "data": data})).into_response()
}

pub fn router(script: MockScript) -> (Router, Arc<MockStats>) {
    let stats = Arc::new(MockStats::default());
    let budgets = script.rules.iter().map(|r| AtomicU32::new(r.fail_first)).collect();
    let state = Arc::new(MockState {
        script,
        budgets,
        stats: stats.clone(),
    });
    let router = Router::new()
        .route("/v1/chat/completions", post(handle_chat))
        .route("/chat/completions", post(handle_chat))
        .route("/v1/embeddings", post(handle_embed))
        .route("/embeddings", post(handle_embed))
        .with_state(state);
    (router, stats)
}

/// A mock bound to a local port, serving on a background task.
pub struct MockServer {
    addr: SocketAddr,
    stats: Arc<MockStats>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `127.0.0.1:port` (0 picks a free port).
    pub async fn start(script: MockScript, port: u16) -> std::io::Result<Self> {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        let addr = listener.local_addr()?;
        let (router, stats) = router(script);
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(MockServer {
            addr,
            stats,
            shutdown: Some(tx),
            task: Some(task),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL to configure an endpoint with.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn stats(&self) -> &MockStats {
        &self.stats
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
