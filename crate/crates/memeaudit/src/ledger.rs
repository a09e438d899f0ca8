//! Append-only JSONL ledgers of endpoint responses.
//!
//! Each record is keyed by a SHA-256 over its request identity. Opening a
//! ledger replays it into memory; a torn final line (from a killed run) is
//! moved to `<file>.quarantine` and cut off, while damage anywhere else is a
//! hard error.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::future::Future;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ORIGINAL_OCCLUSION: &str = "none";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("ledger {path} is corrupt at line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Identity of one logical chat query.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RequestKey {
    pub sample_id: String,
    pub prompt_id: String,
    pub model_name: String,
    /// `"none"` for the unoccluded image, else `occ{n}`.
    pub occlusion_id: String,
}

impl RequestKey {
    pub fn original(sample_id: &str, prompt_id: &str, model_name: &str) -> Self {
        Self::occluded(sample_id, prompt_id, model_name, ORIGINAL_OCCLUSION)
    }

    pub fn occluded(sample_id: &str, prompt_id: &str, model_name: &str, occlusion_id: &str) -> Self {
        RequestKey {
            sample_id: sample_id.into(),
            prompt_id: prompt_id.into(),
            model_name: model_name.into(),
            occlusion_id: occlusion_id.into(),
        }
    }

    /// SHA-256 over the fields in canonical order, separated by 0x1f.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (i, field) in [&self.sample_id, &self.prompt_id, &self.model_name, &self.occlusion_id]
            .into_iter()
            .enumerate()
        {
            if i > 0 {
                h.update([0x1f]);
            }
            h.update(field.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Endpoint reply as captured, untrimmed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key_hash: String,
    #[serde(flatten)]
    pub key: RequestKey,
    pub text: String,
    pub latency_ms: u64,
    pub attempts: u32,
    pub timestamp: u64,
}

impl RunRecord {
    pub fn new(key: RequestKey, response: RawResponse) -> Self {
        RunRecord {
            key_hash: key.hash(),
            key,
            text: response.text,
            latency_ms: response.latency_ms,
            attempts: response.attempt_count,
            timestamp: unix_now(),
        }
    }
}

/// Cached embedding of one payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub key_hash: String,
    pub model_name: String,
    pub payload_kind: String,
    pub vector: Vec<f64>,
    pub timestamp: u64,
}

impl EmbeddingRecord {
    /// Key over model, payload kind and the payload itself.
    pub fn key_for(model_name: &str, payload_kind: &str, payload: &str) -> String {
        let mut h = Sha256::new();
        h.update(model_name.as_bytes());
        h.update([0x1f]);
        h.update(payload_kind.as_bytes());
        h.update([0x1f]);
        h.update(payload.as_bytes());
        hex::encode(h.finalize())
    }
}

pub trait LedgerRecord: Serialize + DeserializeOwned + Clone + Send {
    fn key_hash(&self) -> &str;

    /// Checks the stored hash against the record's own fields where possible.
    fn verify(&self) -> bool {
        true
    }
}

impl LedgerRecord for RunRecord {
    fn key_hash(&self) -> &str {
        &self.key_hash
    }

    fn verify(&self) -> bool {
        self.key.hash() == self.key_hash
    }
}

impl LedgerRecord for EmbeddingRecord {
    fn key_hash(&self) -> &str {
        &self.key_hash
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// A cached value plus whether producing it took a network round trip.
#[derive(Debug, Clone)]
pub struct Lookup<R> {
    pub record: R,
    pub fetched: bool,
}

#[derive(Debug)]
struct Inner<R> {
    records: HashMap<String, R>,
    file: File,
}

#[derive(Debug)]
pub struct Ledger<R> {
    path: PathBuf,
    inner: Mutex<Inner<R>>,
    quarantined: Option<String>,
}

impl<R: LedgerRecord> Ledger<R> {
    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        let io = |source| LedgerError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io(e)),
        };

        let mut records = HashMap::new();
        let mut quarantined = None;
        let mut keep_len = bytes.len();
        let mut needs_newline = false;
        let mut offset = 0;
        let lines: Vec<&[u8]> = bytes.split_inclusive(|b| *b == b'\n').collect();
        for (i, raw) in lines.iter().enumerate() {
            let start = offset;
            offset += raw.len();
            let is_last = i + 1 == lines.len();
            let body = raw.strip_suffix(b"\n").unwrap_or(raw);
            if body.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let parsed = std::str::from_utf8(body)
                .map_err(|e| e.to_string())
                .and_then(|s| serde_json::from_str::<R>(s).map_err(|e| e.to_string()))
                .and_then(|r| {
                    if r.verify() {
                        Ok(r)
                    } else {
                        Err("key hash mismatch".into())
                    }
                });
            match parsed {
                Ok(r) => {
                    needs_newline = is_last && !raw.ends_with(b"\n");
                    records.insert(r.key_hash().to_string(), r);
                }
                Err(message) if is_last => {
                    tracing::warn!(path = %path.display(), "quarantining torn trailing ledger record: {message}");
                    quarantined = Some(String::from_utf8_lossy(body).into_owned());
                    keep_len = start;
                }
                Err(message) => {
                    return Err(LedgerError::Corrupt {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message,
                    })
                }
            }
        }

        if let Some(partial) = &quarantined {
            let qpath = quarantine_path(path);
            let mut q = OpenOptions::new().create(true).append(true).open(&qpath).map_err(io)?;
            writeln!(q, "{partial}").map_err(io)?;
            let f = OpenOptions::new().write(true).open(path).map_err(io)?;
            f.set_len(keep_len as u64).map_err(io)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if needs_newline {
            file.write_all(b"\n").map_err(io)?;
        }
        Ok(Ledger {
            path: path.to_path_buf(),
            inner: Mutex::new(Inner { records, file }),
            quarantined,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// The torn record removed while opening, if any.
    pub fn quarantined(&self) -> Option<&str> {
        self.quarantined.as_deref()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("ledger lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key_hash: &str) -> Option<R> {
        self.inner.lock().expect("ledger lock").records.get(key_hash).cloned()
    }

    pub fn records(&self) -> Vec<R> {
        self.inner
            .lock()
            .expect("ledger lock")
            .records
            .values()
            .cloned()
            .collect()
    }

    /// Appends one record as a single write of a complete line.
    pub fn append(&self, record: &R) -> Result<(), LedgerError> {
        let mut line = serde_json::to_vec(record).expect("records serialize");
        line.push(b'\n');
        let mut inner = self.inner.lock().expect("ledger lock");
        inner
            .file
            .write_all(&line)
            .and_then(|_| inner.file.flush())
            .map_err(|source| LedgerError::Io {
                path: self.path.clone(),
                source,
            })?;
        inner.records.insert(record.key_hash().to_string(), record.clone());
        Ok(())
    }

    /// Returns the stored record for `key_hash`, or runs `fetch`, appends
    /// its record and returns that.
    pub async fn get_or_fetch<F, Fut, E>(&self, key_hash: &str, fetch: F) -> Result<Lookup<R>, E>
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<R, E>>,
        E: From<LedgerError>,
    {
        if let Some(record) = self.get(key_hash) {
            return Ok(Lookup { record, fetched: false });
        }
        let record = fetch().await?;
        debug_assert_eq!(record.key_hash(), key_hash);
        self.append(&record)?;
        Ok(Lookup { record, fetched: true })
    }
}

pub fn quarantine_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".quarantine");
    path.with_file_name(name)
}

/// `{dir}/{dataset}__{model}__{prompt}.jsonl`, with path-hostile characters replaced.
pub fn run_ledger_path(dir: &Path, dataset_id: &str, model_name: &str, prompt_id: &str) -> PathBuf {
    dir.join(format!(
        "{}__{}__{}.jsonl",
        file_safe(dataset_id),
        file_safe(model_name),
        file_safe(prompt_id)
    ))
}

pub fn embedding_ledger_path(dir: &Path, model_name: &str) -> PathBuf {
    dir.join(format!("embeddings__{}.jsonl", file_safe(model_name)))
}

pub fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '.' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Content hash over the `(key_hash, payload)` pairs a report consumed.
/// Independent of timestamps, latencies and file order.
pub fn state_hash<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut lines: Vec<String> = entries
        .into_iter()
        .map(|(k, v)| format!("{k}\t{}", crate::sha256_hex(v.as_bytes())))
        .collect();
    lines.sort();
    crate::sha256_hex(lines.join("\n").as_bytes())
}
