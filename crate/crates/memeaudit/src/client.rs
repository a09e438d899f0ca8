//! Chat-completions and embeddings client.
//!
//! Every network attempt passes through a semaphore (`max_inflight`) and a
//! sliding-window limiter (`requests_per_minute` over any 60 s window).
//! 429, 5xx, timeouts and connection failures are retried with exponential
//! backoff; 401/403 are configuration errors; anything else malformed is a
//! protocol error.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::time::Instant;

use crate::imageio::EncodedImage;
use crate::ledger::{RawResponse, RequestKey};

pub const SAMPLE_HEADER: &str = "x-meme-sample-id";
pub const PROMPT_HEADER: &str = "x-meme-prompt-id";
pub const OCCLUSION_HEADER: &str = "x-meme-occlusion-id";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport error after {attempts} attempts: {}", log.join("; "))]
    Transport { attempts: u32, log: Vec<String> },
    #[error("precondition failed: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    #[serde(default = "defaults::max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "defaults::initial_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "defaults::max_backoff_ms")]
    pub max_backoff_ms: u64,
    #[serde(default = "defaults::timeout_ms")]
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: defaults::max_attempts(),
            initial_backoff_ms: defaults::initial_backoff_ms(),
            max_backoff_ms: defaults::max_backoff_ms(),
            timeout_ms: defaults::timeout_ms(),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, for `attempt >= 1`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

mod defaults {
    pub fn temperature() -> f64 {
        1.0
    }
    pub fn max_tokens() -> u32 {
        256
    }
    pub fn max_inflight() -> usize {
        4
    }
    pub fn requests_per_minute() -> u32 {
        60
    }
    pub fn max_attempts() -> u32 {
        5
    }
    pub fn initial_backoff_ms() -> u64 {
        500
    }
    pub fn max_backoff_ms() -> u64 {
        16_000
    }
    pub fn timeout_ms() -> u64 {
        120_000
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEndpoint {
    /// Name used in reports and ledger file names.
    pub id: String,
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default = "defaults::max_tokens")]
    pub max_tokens: u32,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "defaults::max_inflight")]
    pub max_inflight: usize,
    #[serde(default = "defaults::requests_per_minute")]
    pub requests_per_minute: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl ModelEndpoint {
    pub fn new(id: &str, base_url: &str, model_name: &str) -> Self {
        ModelEndpoint {
            id: id.into(),
            base_url: base_url.into(),
            model_name: model_name.into(),
            temperature: defaults::temperature(),
            max_tokens: defaults::max_tokens(),
            auth_token_env: None,
            max_inflight: defaults::max_inflight(),
            requests_per_minute: defaults::requests_per_minute(),
            retry: RetryPolicy::default(),
        }
    }

    /// Every problem with the endpoint settings, prefixed with its id.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let p = format!("endpoint '{}'", self.id);
        if self.id.trim().is_empty() {
            errs.push("endpoint id must be non-empty".to_string());
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            errs.push(format!(
                "{p}: base_url must start with http:// or https://, got '{}'",
                self.base_url
            ));
        }
        if self.model_name.trim().is_empty() {
            errs.push(format!("{p}: model_name must be non-empty"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            errs.push(format!("{p}: temperature {} outside [0, 2]", self.temperature));
        }
        if self.max_tokens == 0 {
            errs.push(format!("{p}: max_tokens must be at least 1"));
        }
        if self.max_inflight == 0 {
            errs.push(format!("{p}: max_inflight must be at least 1"));
        }
        if self.requests_per_minute == 0 {
            errs.push(format!("{p}: requests_per_minute must be at least 1"));
        }
        if self.retry.max_attempts == 0 {
            errs.push(format!("{p}: retry.max_attempts must be at least 1"));
        }
        if let Some(var) = &self.auth_token_env {
            if std::env::var(var).is_err() {
                errs.push(format!("{p}: environment variable {var} is not set"));
            }
        }
        errs
    }
}

/// Admits at most `limit` events in any trailing `window`.
#[derive(Debug)]
pub struct RateLimiter {
    limit: usize,
    window: Duration,
    log: tokio::sync::Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(limit: usize, window: Duration) -> Self {
        RateLimiter {
            limit: limit.max(1),
            window,
            log: tokio::sync::Mutex::new(VecDeque::new()),
        }
    }

    pub fn per_minute(limit: u32) -> Self {
        Self::new(limit as usize, Duration::from_secs(60))
    }

    pub async fn acquire(&self) {
        loop {
            let mut log = self.log.lock().await;
            let now = Instant::now();
            while log.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
                log.pop_front();
            }
            if log.len() < self.limit {
                log.push_back(now);
                return;
            }
            let wait = self.window - now.duration_since(log[0]);
            drop(log);
            tokio::time::sleep(wait).await;
        }
    }
}

enum Attempt {
    Done(Value),
    Retry(String),
}

#[derive(Debug)]
pub struct VlmClient {
    endpoint: ModelEndpoint,
    http: reqwest::Client,
    token: Option<String>,
    inflight: Semaphore,
    limiter: RateLimiter,
    embed_dim: Mutex<Option<usize>>,
    requests: AtomicU64,
}

impl VlmClient {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, ClientError> {
        let token = match &endpoint.auth_token_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| ClientError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_millis(endpoint.retry.timeout_ms))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(VlmClient {
            inflight: Semaphore::new(endpoint.max_inflight.max(1)),
            limiter: RateLimiter::per_minute(endpoint.requests_per_minute),
            endpoint,
            http,
            token,
            embed_dim: Mutex::new(None),
            requests: AtomicU64::new(0),
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    /// Network attempts issued so far, retries included.
    pub fn requests_sent(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.endpoint.base_url.trim_end_matches('/'))
    }

    /// One classification query: prompt text plus the image as a data URL.
    pub async fn chat_classify(
        &self,
        key: &RequestKey,
        prompt: &str,
        image: &EncodedImage,
    ) -> Result<RawResponse, ClientError> {
        if prompt.is_empty() {
            return Err(ClientError::Precondition("prompt is empty".into()));
        }
        let body = json!({
            "model": self.endpoint.model_name,
            "temperature": self.endpoint.temperature,
            "max_tokens": self.endpoint.max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": image.data_url()}},
                ],
            }],
        });
        let headers = [
            (SAMPLE_HEADER, key.sample_id.as_str()),
            (PROMPT_HEADER, key.prompt_id.as_str()),
            (OCCLUSION_HEADER, key.occlusion_id.as_str()),
        ];
        let (value, attempts, latency) = self.post("chat/completions", &body, &headers).await?;
        let text = lookup(
            &value,
            &[
                Seg::Key("choices"),
                Seg::Index(0),
                Seg::Key("message"),
                Seg::Key("content"),
            ],
        )?
        .as_str()
        .ok_or_else(|| ClientError::Protocol("choices[0].message.content is not a string".into()))?
        .to_string();
        Ok(RawResponse {
            text,
            latency_ms: latency.as_millis() as u64,
            attempt_count: attempts,
        })
    }

    /// Unit-norm embedding of a text payload (images go in as data URLs).
    pub async fn embed(&self, input: &str) -> Result<Vec<f64>, ClientError> {
        if input.is_empty() {
            return Err(ClientError::Precondition("embedding payload is empty".into()));
        }
        let body = json!({"model": self.endpoint.model_name, "input": input});
        let (value, _, _) = self.post("embeddings", &body, &[]).await?;
        let raw = lookup(&value, &[Seg::Key("data"), Seg::Index(0), Seg::Key("embedding")])?
            .as_array()
            .ok_or_else(|| ClientError::Protocol("data[0].embedding is not an array".into()))?;
        let vector: Vec<f64> = raw
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| ClientError::Protocol("data[0].embedding holds a non-number".into()))
            })
            .collect::<Result<_, _>>()?;
        {
            let mut dim = self.embed_dim.lock().expect("dim lock");
            match *dim {
                Some(d) if d != vector.len() => {
                    return Err(ClientError::Protocol(format!(
                        "embedding dimension changed from {d} to {}",
                        vector.len()
                    )))
                }
                Some(_) => {}
                None => *dim = Some(vector.len()),
            }
        }
        memeaudit_core::typology::l2_normalize(&vector)
            .map_err(|_| ClientError::Protocol("embedding has zero norm".into()))
    }

    async fn post(
        &self,
        path: &str,
        body: &Value,
        headers: &[(&str, &str)],
    ) -> Result<(Value, u32, Duration), ClientError> {
        let policy = &self.endpoint.retry;
        let mut log = Vec::new();
        for attempt in 1..=policy.max_attempts {
            let started = Instant::now();
            let outcome = {
                let _permit = self.inflight.acquire().await.expect("semaphore never closed");
                self.limiter.acquire().await;
                self.requests.fetch_add(1, Ordering::SeqCst);
                self.attempt(path, body, headers).await?
            };
            match outcome {
                Attempt::Done(v) => return Ok((v, attempt, started.elapsed())),
                Attempt::Retry(why) => {
                    tracing::debug!(attempt, "retrying {path}: {why}");
                    log.push(format!("attempt {attempt}: {why}"));
                    if attempt < policy.max_attempts {
                        tokio::time::sleep(policy.backoff(attempt)).await;
                    }
                }
            }
        }
        Err(ClientError::Transport {
            attempts: policy.max_attempts,
            log,
        })
    }

    async fn attempt(&self, path: &str, body: &Value, headers: &[(&str, &str)]) -> Result<Attempt, ClientError> {
        let mut req = self.http.post(self.url(path)).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        for (name, value) in headers {
            req = req.header(*name, *value);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = resp.status();
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) => return Ok(Attempt::Retry(format!("reading body: {e}"))),
        };
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(ClientError::Config(format!("endpoint rejected credentials ({status})")));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Ok(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ClientError::Protocol(format!(
                "HTTP {status}: {}",
                truncate(&text, 300)
            )));
        }
        serde_json::from_str(&text)
            .map(Attempt::Done)
            .map_err(|e| ClientError::Protocol(format!("response body is not JSON ({e}): {}", truncate(&text, 300))))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

enum Seg {
    Key(&'static str),
    Index(usize),
}

fn render_path(path: &[Seg]) -> String {
    let mut out = String::new();
    for seg in path {
        match seg {
            Seg::Key(k) => {
                if !out.is_empty() {
                    out.push('.');
                }
                out.push_str(k);
            }
            Seg::Index(i) => out.push_str(&format!("[{i}]")),
        }
    }
    out
}

/// Walks `path`, naming the full path and the first missing step on failure.
fn lookup<'a>(v: &'a Value, path: &[Seg]) -> Result<&'a Value, ClientError> {
    let mut cur = v;
    for (i, seg) in path.iter().enumerate() {
        let next = match seg {
            Seg::Key(k) => cur.get(*k),
            Seg::Index(idx) => cur.get(*idx),
        };
        cur = next.ok_or_else(|| {
            ClientError::Protocol(format!(
                "response is missing field {} (no {})",
                render_path(path),
                render_path(&path[..=i])
            ))
        })?;
    }
    Ok(cur)
}
