//! The eval, leaderboard, audit, typology and agreement workflows.
//!
//! Queries fan out up to each endpoint's `max_inflight`, but results are
//! always gathered in manifest order so reports do not depend on timing.
//! Every query goes through a ledger, so a rerun only fetches what is
//! missing and a warm rerun fetches nothing.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use futures::stream::{self, StreamExt, TryStreamExt};
use memeaudit_core::audit::{AuditOutcome, AuditSummary};
use memeaudit_core::corpus::{subsample, LabelSchema, MemeSample, Polarity, Quota};
use memeaudit_core::metrics::{
    krippendorff_alpha, stability, weighted_mf1, AgreementResult, EvalRow, LeaderboardCell, StabilityRow,
};
use memeaudit_core::occlusion::{occlude, occlusion_id};
use memeaudit_core::parse::{parse_label, parse_response, support, Ambiguity, ParsedPrediction};
use memeaudit_core::prompt::{render_prompt, PromptSpec};
use memeaudit_core::slic::{choose_target_count, slic_segment, SlicParams};
use memeaudit_core::typology::{
    build_group, combine_embeddings, EmbedMode, ErrorDirection, GroupMember, TypologyParams, TypologyReport,
};
use memeaudit_core::{fmt2, Case};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, ModelEndpoint, VlmClient};
use crate::config::{ConfigErrors, DatasetConfig, RunConfig, TextSource};
use crate::imageio::{encode_png, load_raster, read_encoded, ImageError};
use crate::ledger::{
    embedding_ledger_path, file_safe, run_ledger_path, state_hash, EmbeddingRecord, Ledger, LedgerError, RequestKey,
    RunRecord,
};
use crate::manifest::{load_manifest, LoadedManifest, ManifestError};
use crate::report::{
    atomic_write, audit_csv, audit_summary_csv, audit_summary_text, eval_text, leaderboard_text, read_csv, to_csv,
    typology_text, EvalCsvRow, LeaderboardCsvRow, RunMeta, StabilityCsvRow,
};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("sample {sample_id}: {source}")]
    Client { sample_id: String, source: ClientError },
    #[error(transparent)]
    ClientSetup(ClientError),
    #[error("budget of {0} new requests exhausted; rerun to resume from the ledger")]
    BudgetExhausted(u64),
    #[error("{0}")]
    MissingInput(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop with an error once this many ledger misses have been fetched.
    pub max_new_requests: Option<u64>,
}

struct Budget {
    limit: Option<u64>,
    used: AtomicU64,
}

impl Budget {
    fn new(limit: Option<u64>) -> Self {
        Budget {
            limit,
            used: AtomicU64::new(0),
        }
    }

    fn take(&self) -> Result<(), CommandError> {
        let n = self.used.fetch_add(1, Ordering::SeqCst);
        match self.limit {
            Some(limit) if n >= limit => Err(CommandError::BudgetExhausted(limit)),
            _ => Ok(()),
        }
    }

    fn fetched(&self) -> u64 {
        let used = self.used.load(Ordering::SeqCst);
        self.limit.map_or(used, |l| used.min(l))
    }
}

/// One parsed original prediction, as stored in `eval/predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub dataset_id: String,
    pub model_id: String,
    pub prompt_id: String,
    pub sample_id: String,
    pub gold: Polarity,
    pub label: Option<Polarity>,
    pub ambiguity: Ambiguity,
    pub explanation: Option<String>,
}

/// One audited sample, as stored in `audit/outcomes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub dataset_id: String,
    pub model_id: String,
    pub prompt_id: String,
    pub segment_count: usize,
    pub outcome: AuditOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub dataset_id: String,
    pub model_id: String,
    pub sample_id: String,
    pub reason: String,
}

fn load_dataset(cfg: &RunConfig, ds: &DatasetConfig) -> Result<(LoadedManifest, LabelSchema), CommandError> {
    let schema = ds.resolve_schema().map_err(CommandError::Invalid)?;
    let mut loaded = load_manifest(&ds.manifest, schema.clone())?;
    if let Some(q) = ds.per_class_quota {
        loaded.manifest = subsample(&loaded.manifest, Quota::PerClass(q), cfg.subsample_seed)
            .map_err(|e| CommandError::Invalid(format!("dataset '{}': {e}", ds.id)))?;
    }
    Ok((loaded, schema))
}

fn make_clients(cfg: &RunConfig) -> Result<Vec<Arc<VlmClient>>, CommandError> {
    cfg.endpoints
        .iter()
        .map(|e| {
            VlmClient::new(e.clone())
                .map(Arc::new)
                .map_err(CommandError::ClientSetup)
        })
        .collect()
}

async fn query(
    client: &VlmClient,
    ledger: &Ledger<RunRecord>,
    budget: &Budget,
    key: RequestKey,
    prompt: &str,
    image: impl FnOnce() -> Result<crate::imageio::EncodedImage, CommandError>,
) -> Result<(RunRecord, bool), CommandError> {
    let hash = key.hash();
    let lookup = ledger
        .get_or_fetch(&hash, || async {
            budget.take()?;
            let image = image()?;
            let resp = client
                .chat_classify(&key, prompt, &image)
                .await
                .map_err(|source| CommandError::Client {
                    sample_id: key.sample_id.clone(),
                    source,
                })?;
            Ok::<_, CommandError>(RunRecord::new(key.clone(), resp))
        })
        .await?;
    Ok((lookup.record, lookup.fetched))
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    pub predictions: Vec<PredictionRow>,
    /// Ledger misses fetched over the network during this run.
    pub fetched: u64,
    pub out_dir: PathBuf,
}

pub async fn cmd_eval(cfg: &RunConfig, opts: &RunOptions) -> Result<EvalOutput, CommandError> {
    cfg.validate()?;
    let specs = cfg.prompt_specs();
    let clients = make_clients(cfg)?;
    let budget = Budget::new(opts.max_new_requests);
    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    let mut consumed: Vec<(String, String)> = Vec::new();

    for ds in &cfg.datasets {
        let (loaded, schema) = load_dataset(cfg, ds)?;
        let samples = loaded.manifest.samples();
        for client in &clients {
            let ep = client.endpoint();
            for &spec in &specs {
                let ledger = Ledger::open(&run_ledger_path(&cfg.ledger_dir, &ds.id, &ep.id, &spec.id()))?;
                tracing::info!(dataset = %ds.id, model = %ep.id, prompt = %spec.id(), "evaluating {} samples", samples.len());
                let records: Vec<(RunRecord, bool)> =
                    stream::iter(
                        samples.iter().map(|s| {
                            let rendered = render_prompt(s, &schema, spec);
                            for w in &rendered.warnings {
                                tracing::warn!(sample = %s.sample_id, "{w:?}");
                            }
                            let key = RequestKey::original(&s.sample_id, &spec.id(), &ep.model_name);
                            let path = loaded.image_path(s);
                            let (client, ledger, budget) = (client.as_ref(), &ledger, &budget);
                            async move {
                                query(client, ledger, budget, key, &rendered.text, || Ok(read_encoded(&path)?)).await
                            }
                        }),
                    )
                    .buffered(ep.max_inflight)
                    .try_collect()
                    .await?;

                let parsed: Vec<ParsedPrediction> = records
                    .iter()
                    .map(|(r, _)| parse_response(&r.text, &schema, spec.output))
                    .collect();
                let gold: Vec<Polarity> = samples.iter().map(|s| s.gold).collect();
                let pred: Vec<Option<Polarity>> = parsed.iter().map(|p| p.label).collect();
                let stat = support(&parsed).map_err(|e| CommandError::Invalid(e.to_string()))?;
                rows.push(
                    EvalRow::compute(&ds.id, &ep.id, spec, &gold, &pred, stat)
                        .map_err(|e| CommandError::Invalid(e.to_string()))?,
                );
                for ((s, p), (r, _)) in samples.iter().zip(parsed).zip(&records) {
                    consumed.push((r.key_hash.clone(), r.text.clone()));
                    predictions.push(PredictionRow {
                        dataset_id: ds.id.clone(),
                        model_id: ep.id.clone(),
                        prompt_id: spec.id(),
                        sample_id: s.sample_id.clone(),
                        gold: s.gold,
                        label: p.label,
                        ambiguity: p.ambiguity,
                        explanation: p.explanation,
                    });
                }
            }
        }
    }

    let dir = cfg.out_dir.join("eval");
    let mut meta = RunMeta::new(
        "eval",
        &cfg.hash(),
        &state_hash(consumed.iter().map(|(k, v)| (k.as_str(), v.as_str()))),
    );
    let csv_rows: Vec<EvalCsvRow> = rows.iter().map(EvalCsvRow::from).collect();
    meta.emit(&dir, "results.csv", &to_csv(&csv_rows))
        .map_err(io_err(&dir))?;
    meta.emit(&dir, "results.txt", eval_text(&meta, &rows).as_bytes())
        .map_err(io_err(&dir))?;
    meta.emit(&dir, "predictions.jsonl", &jsonl(&predictions))
        .map_err(io_err(&dir))?;
    meta.finish(&dir).map_err(io_err(&dir))?;
    Ok(EvalOutput {
        rows,
        predictions,
        fetched: budget.fetched(),
        out_dir: dir,
    })
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("rows serialize");
        out.push(b'\n');
    }
    out
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<Vec<T>, CommandError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CommandError::MissingInput(format!("{} not found; {hint}", path.display())),
        _ => CommandError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CommandError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn read_eval_csv(path: &Path) -> Result<Vec<EvalCsvRow>, CommandError> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            CommandError::MissingInput(format!("{} not found; run `memeaudit eval` first", path.display()))
        }
        _ => CommandError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    read_csv(&bytes).map_err(|e| CommandError::Invalid(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct LeaderboardOutput {
    pub cells: Vec<LeaderboardCell>,
    pub stability: Vec<StabilityRow>,
}

/// Weighted macro-F1 per (model, prompt) over every dataset in the table,
/// plus mean/std per model when all eight prompts are present.
pub fn leaderboard(rows: &[EvalCsvRow]) -> Result<LeaderboardOutput, CommandError> {
    let mut datasets: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !datasets.contains(&r.dataset_id.as_str()) {
            datasets.push(&r.dataset_id);
        }
        if !models.contains(&r.model_id.as_str()) {
            models.push(&r.model_id);
        }
    }
    let mut cells = Vec::new();
    let mut missing = Vec::new();
    let mut stab = Vec::new();
    for model in &models {
        let mut per_model = Vec::new();
        for spec in PromptSpec::ALL {
            let pid = spec.id();
            let present: Vec<&EvalCsvRow> = rows
                .iter()
                .filter(|r| r.model_id == *model && r.prompt_id == pid)
                .collect();
            if present.is_empty() {
                continue;
            }
            let mut inputs = Vec::new();
            for d in &datasets {
                match present.iter().find(|r| r.dataset_id == *d) {
                    Some(r) => inputs.push((r.macro_f1, r.dataset_size)),
                    None => missing.push(format!("model '{model}' prompt '{pid}' dataset '{d}'")),
                }
            }
            if inputs.len() == datasets.len() {
                let w = weighted_mf1(&inputs).map_err(|e| CommandError::Invalid(e.to_string()))?;
                per_model.push((spec, w));
                cells.push(LeaderboardCell {
                    model_id: model.to_string(),
                    prompt: spec,
                    weighted_mf1: w,
                });
            }
        }
        if let Ok(s) = stability(model, &per_model) {
            stab.push(s);
        }
    }
    if !missing.is_empty() {
        return Err(CommandError::MissingInput(format!(
            "missing eval cells: {}",
            missing.join(", ")
        )));
    }
    Ok(LeaderboardOutput { cells, stability: stab })
}

pub fn cmd_leaderboard(eval_csv: &Path, out_dir: &Path) -> Result<LeaderboardOutput, CommandError> {
    let bytes = std::fs::read(eval_csv).map_err(io_err(eval_csv))?;
    let rows = read_eval_csv(eval_csv)?;
    let out = leaderboard(&rows)?;
    let dir = out_dir.join("eval");
    let lb: Vec<LeaderboardCsvRow> = out
        .cells
        .iter()
        .map(|c| LeaderboardCsvRow {
            model_id: c.model_id.clone(),
            prompt_id: c.prompt.id(),
            weighted_mf1: c.weighted_mf1,
        })
        .collect();
    let st: Vec<StabilityCsvRow> = out
        .stability
        .iter()
        .map(|s| StabilityCsvRow {
            model_id: s.model_id.clone(),
            mean: s.mean,
            std_dev: s.std_dev,
        })
        .collect();
    let input_hash = crate::sha256_hex(&bytes);
    atomic_write(&dir.join("leaderboard.csv"), &to_csv(&lb)).map_err(io_err(&dir))?;
    atomic_write(&dir.join("stability.csv"), &to_csv(&st)).map_err(io_err(&dir))?;
    atomic_write(
        &dir.join("leaderboard.txt"),
        leaderboard_text(&input_hash, &out.cells, &out.stability).as_bytes(),
    )
    .map_err(io_err(&dir))?;
    Ok(out)
}

/// The configured audit prompt, else the model's best weighted-macro-F1
/// prompt (earliest canonical prompt on ties).
pub fn choose_audit_prompt(cfg: &RunConfig, rows: &[EvalCsvRow], model_id: &str) -> Result<PromptSpec, CommandError> {
    if let Some(p) = &cfg.audit.prompt {
        return p
            .parse()
            .map_err(|e: memeaudit_core::prompt::UnknownPrompt| CommandError::Invalid(e.to_string()));
    }
    let model_rows: Vec<EvalCsvRow> = rows.iter().filter(|r| r.model_id == model_id).cloned().collect();
    let lb = leaderboard(&model_rows)?;
    let mut best: Option<&LeaderboardCell> = None;
    for c in &lb.cells {
        if best.is_none_or(|b| c.weighted_mf1 > b.weighted_mf1) {
            best = Some(c);
        }
    }
    best.map(|c| c.prompt).ok_or_else(|| {
        CommandError::MissingInput(format!(
            "no eval results for model '{model_id}'; run `memeaudit eval` first"
        ))
    })
}

enum SampleAudit {
    Done(OutcomeRow, Vec<(String, String)>),
    Skipped(SkippedRow),
}

#[allow(clippy::too_many_arguments)]
async fn audit_sample(
    client: &VlmClient,
    ledger: &Ledger<RunRecord>,
    budget: &Budget,
    schema: &LabelSchema,
    spec: PromptSpec,
    dataset_id: &str,
    sample: &MemeSample,
    original: Polarity,
    image_path: PathBuf,
    png_dir: &Path,
) -> Result<SampleAudit, CommandError> {
    let ep = client.endpoint();
    let skip = |reason: String| {
        tracing::warn!(sample = %sample.sample_id, "skipping audit: {reason}");
        Ok(SampleAudit::Skipped(SkippedRow {
            dataset_id: dataset_id.into(),
            model_id: ep.id.clone(),
            sample_id: sample.sample_id.clone(),
            reason,
        }))
    };
    let raster = match load_raster(&image_path) {
        Ok(r) => r,
        Err(e) => return skip(e.to_string()),
    };
    let k = match choose_target_count(raster.width(), raster.height()) {
        Ok(k) => k,
        Err(e) => return skip(e.to_string()),
    };
    let params = SlicParams::new(k).expect("chosen K is in range");
    let seg_input = raster.clone();
    let map = tokio::task::spawn_blocking(move || slic_segment(&seg_input, &params))
        .await
        .map_err(|e| CommandError::Invalid(format!("segmentation task failed: {e}")))?
        .map_err(|e| CommandError::Invalid(e.to_string()))?;

    let prompt = render_prompt(sample, schema, spec).text;
    let results: Vec<Result<(RunRecord, bool), CommandError>> = stream::iter((0..map.segment_count()).map(|seg| {
        let occ_id = occlusion_id(seg);
        let key = RequestKey::occluded(&sample.sample_id, &spec.id(), &ep.model_name, &occ_id);
        let png_path = png_dir.join(format!("{}.{occ_id}.png", file_safe(&sample.sample_id)));
        let (raster, map, prompt) = (&raster, &map, &prompt);
        async move {
            let occluded = occlude(raster, map, seg).map_err(|e| CommandError::Invalid(e.to_string()))?;
            let png = encode_png(&occluded)?;
            atomic_write(&png_path, &png.bytes).map_err(io_err(&png_path))?;
            query(client, ledger, budget, key, prompt, move || Ok(png)).await
        }
    }))
    .buffered(ep.max_inflight)
    .collect()
    .await;

    let mut preds = Vec::with_capacity(results.len());
    let mut consumed = Vec::new();
    for (seg, r) in results.into_iter().enumerate() {
        match r {
            Ok((record, _)) => {
                let mut p = parse_label(&record.text, schema);
                p.explanation = None;
                preds.push(p);
                consumed.push((record.key_hash, record.text));
            }
            Err(CommandError::Client { source, .. }) => return skip(format!("segment {seg}: {source}")),
            Err(e) => return Err(e),
        }
    }
    let outcome = AuditOutcome::new(&sample.sample_id, sample.gold, Some(original), preds)
        .map_err(|e| CommandError::Invalid(e.to_string()))?;
    Ok(SampleAudit::Done(
        OutcomeRow {
            dataset_id: dataset_id.into(),
            model_id: ep.id.clone(),
            prompt_id: spec.id(),
            segment_count: map.segment_count(),
            outcome,
        },
        consumed,
    ))
}

#[derive(Debug, Clone)]
pub struct AuditOutput {
    pub outcomes: Vec<OutcomeRow>,
    pub summaries: Vec<(AuditSummary, String, usize)>,
    pub skipped: Vec<SkippedRow>,
    pub fetched: u64,
    pub out_dir: PathBuf,
}

pub async fn cmd_audit(cfg: &RunConfig, opts: &RunOptions) -> Result<AuditOutput, CommandError> {
    cfg.validate()?;
    let eval_dir = cfg.out_dir.join("eval");
    let eval_rows = read_eval_csv(&eval_dir.join("results.csv"))?;
    let predictions: Vec<PredictionRow> =
        read_jsonl(&eval_dir.join("predictions.jsonl"), "run `memeaudit eval` first")?;
    let by_key: HashMap<(&str, &str, &str, &str), &PredictionRow> = predictions
        .iter()
        .map(|p| {
            (
                (
                    p.dataset_id.as_str(),
                    p.model_id.as_str(),
                    p.prompt_id.as_str(),
                    p.sample_id.as_str(),
                ),
                p,
            )
        })
        .collect();
    let clients = make_clients(cfg)?;
    let budget = Budget::new(opts.max_new_requests);
    let dir = cfg.out_dir.join("audit");

    let mut all_outcomes = Vec::new();
    let mut summaries = Vec::new();
    let mut skipped = Vec::new();
    let mut consumed = Vec::new();
    let mut per_pair: Vec<(String, String, Vec<AuditOutcome>, AuditSummary)> = Vec::new();
    for ds in &cfg.datasets {
        let (loaded, schema) = load_dataset(cfg, ds)?;
        for client in &clients {
            let ep: &ModelEndpoint = client.endpoint();
            let spec = choose_audit_prompt(cfg, &eval_rows, &ep.id)?;
            let pid = spec.id();
            let mut targets = Vec::new();
            for s in loaded.manifest.samples() {
                let p = by_key.get(&(ds.id.as_str(), ep.id.as_str(), pid.as_str(), s.sample_id.as_str())).ok_or_else(|| {
                    CommandError::MissingInput(format!(
                        "no eval prediction for dataset '{}' model '{}' prompt '{pid}' sample '{}'; run `memeaudit eval` with this prompt first",
                        ds.id, ep.id, s.sample_id
                    ))
                })?;
                if let Some(label) = p.label.filter(|l| *l != s.gold) {
                    targets.push((s, label));
                }
            }
            tracing::info!(dataset = %ds.id, model = %ep.id, prompt = %pid, "auditing {} misclassified samples", targets.len());
            let ledger = Ledger::open(&run_ledger_path(&cfg.ledger_dir, &ds.id, &ep.id, &pid))?;
            let png_dir = dir.join("occluded").join(file_safe(&ds.id)).join(file_safe(&ep.id));
            let results: Vec<SampleAudit> = stream::iter(targets.iter().map(|(s, label)| {
                audit_sample(
                    client,
                    &ledger,
                    &budget,
                    &schema,
                    spec,
                    &ds.id,
                    s,
                    *label,
                    loaded.image_path(s),
                    &png_dir,
                )
            }))
            .buffered(ep.max_inflight)
            .try_collect()
            .await?;

            let mut outcomes = Vec::new();
            let mut n_skipped = 0;
            for r in results {
                match r {
                    SampleAudit::Done(row, used) => {
                        consumed.extend(used);
                        outcomes.push(row.outcome.clone());
                        all_outcomes.push(row);
                    }
                    SampleAudit::Skipped(s) => {
                        n_skipped += 1;
                        skipped.push(s);
                    }
                }
            }
            let summary = AuditSummary::from_outcomes(&ds.id, &ep.id, &outcomes);
            summaries.push((summary.clone(), pid.clone(), n_skipped));
            per_pair.push((ds.id.clone(), ep.id.clone(), outcomes, summary));
        }
    }

    let mut meta = RunMeta::new(
        "audit",
        &cfg.hash(),
        &state_hash(consumed.iter().map(|(k, v)| (k.as_str(), v.as_str()))),
    );
    for (ds, model, outcomes, summary) in &per_pair {
        let name = format!("{}__{}.csv", file_safe(ds), file_safe(model));
        meta.emit(&dir, &name, &audit_csv(outcomes, summary))
            .map_err(io_err(&dir))?;
    }
    meta.emit(&dir, "summary.csv", &audit_summary_csv(&summaries))
        .map_err(io_err(&dir))?;
    meta.emit(&dir, "summary.txt", audit_summary_text(&meta, &summaries).as_bytes())
        .map_err(io_err(&dir))?;
    meta.emit(&dir, "outcomes.jsonl", &jsonl(&all_outcomes))
        .map_err(io_err(&dir))?;
    meta.emit(&dir, "skipped.csv", &to_csv(&skipped))
        .map_err(io_err(&dir))?;
    meta.finish(&dir).map_err(io_err(&dir))?;
    Ok(AuditOutput {
        outcomes: all_outcomes,
        summaries,
        skipped,
        fetched: budget.fetched(),
        out_dir: dir,
    })
}

async fn embed_cached(
    client: &VlmClient,
    ledger: &Ledger<EmbeddingRecord>,
    budget: &Budget,
    kind: &str,
    payload: &str,
) -> Result<EmbeddingRecord, CommandError> {
    let model = &client.endpoint().model_name;
    let key = EmbeddingRecord::key_for(model, kind, payload);
    let lookup = ledger
        .get_or_fetch(&key, || async {
            budget.take()?;
            let vector = client.embed(payload).await.map_err(|source| CommandError::Client {
                sample_id: format!("<{kind} embedding>"),
                source,
            })?;
            Ok::<_, CommandError>(EmbeddingRecord {
                key_hash: key.clone(),
                model_name: model.clone(),
                payload_kind: kind.into(),
                vector,
                timestamp: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            })
        })
        .await?;
    Ok(lookup.record)
}

#[derive(Debug, Clone)]
pub struct TypologyOutput {
    pub reports: Vec<TypologyReport>,
    pub fetched: u64,
    pub out_dir: PathBuf,
}

pub async fn cmd_typology(cfg: &RunConfig, opts: &RunOptions) -> Result<TypologyOutput, CommandError> {
    cfg.validate()?;
    let audit_path = cfg.out_dir.join("audit").join("outcomes.jsonl");
    if !audit_path.exists() {
        return Err(CommandError::MissingInput(format!(
            "no audit outcomes at {}; run `memeaudit audit` before `memeaudit typology`",
            audit_path.display()
        )));
    }
    let outcomes: Vec<OutcomeRow> = read_jsonl(&audit_path, "run `memeaudit audit` first")?;
    let tcfg = &cfg.typology;
    let embedder = tcfg
        .embedder
        .clone()
        .ok_or_else(|| CommandError::Invalid("typology.embedder is not configured".into()))?;
    let client = VlmClient::new(embedder).map_err(CommandError::ClientSetup)?;
    let ledger: Ledger<EmbeddingRecord> =
        Ledger::open(&embedding_ledger_path(&cfg.ledger_dir, &client.endpoint().model_name))?;
    let budget = Budget::new(opts.max_new_requests);
    let explanations: HashMap<(String, String, String, String), Option<String>> =
        if tcfg.mode == EmbedMode::TextOnly && tcfg.text_source == TextSource::Explanation {
            read_jsonl::<PredictionRow>(
                &cfg.out_dir.join("eval").join("predictions.jsonl"),
                "run `memeaudit eval` first",
            )?
            .into_iter()
            .map(|p| ((p.dataset_id, p.model_id, p.prompt_id, p.sample_id), p.explanation))
            .collect()
        } else {
            HashMap::new()
        };
    let params = TypologyParams {
        seed: tcfg.seed,
        top_terms: tcfg.top_terms,
        representatives: tcfg.representatives,
    };

    let mut pairs: Vec<(String, String)> = Vec::new();
    for o in &outcomes {
        let pair = (o.dataset_id.clone(), o.model_id.clone());
        if !pairs.contains(&pair) {
            pairs.push(pair);
        }
    }
    let mut manifests: BTreeMap<String, LoadedManifest> = BTreeMap::new();
    let mut consumed: Vec<(String, String)> = Vec::new();
    let mut reports = Vec::new();
    for (ds_id, model_id) in &pairs {
        if !manifests.contains_key(ds_id) {
            let ds =
                cfg.datasets.iter().find(|d| &d.id == ds_id).ok_or_else(|| {
                    CommandError::Invalid(format!("audit outcomes mention unknown dataset '{ds_id}'"))
                })?;
            manifests.insert(ds_id.clone(), load_dataset(cfg, ds)?.0);
        }
        let loaded = &manifests[ds_id];
        let rows: Vec<&OutcomeRow> = outcomes
            .iter()
            .filter(|o| &o.dataset_id == ds_id && &o.model_id == model_id)
            .collect();
        let members: Vec<Option<(GroupMember, Vec<EmbeddingRecord>)>> = stream::iter(rows.iter().map(|row| {
            let (client, ledger, budget, explanations) = (&client, &ledger, &budget, &explanations);
            async move {
                let o = &row.outcome;
                let sample = loaded.manifest.get(&o.sample_id).ok_or_else(|| {
                    CommandError::Invalid(format!(
                        "audited sample '{}' is not in dataset '{}'",
                        o.sample_id, row.dataset_id
                    ))
                })?;
                let mut used = Vec::new();
                let (vector, text) = match tcfg.mode {
                    EmbedMode::Multimodal => {
                        let url = read_encoded(&loaded.image_path(sample))?.data_url();
                        let image = embed_cached(client, ledger, budget, "image", &url).await?;
                        let text = if sample.ocr_text.trim().is_empty() {
                            tracing::warn!(sample = %o.sample_id, "empty OCR text; using the image embedding alone");
                            None
                        } else {
                            Some(embed_cached(client, ledger, budget, "text", &sample.ocr_text).await?)
                        };
                        let v = combine_embeddings(&image.vector, text.as_ref().map(|t| t.vector.as_slice()))
                            .map_err(|e| CommandError::Invalid(e.to_string()))?;
                        used.push(image);
                        used.extend(text);
                        (v, sample.ocr_text.clone())
                    }
                    EmbedMode::TextOnly => {
                        let text = match tcfg.text_source {
                            TextSource::Ocr => sample.ocr_text.clone(),
                            TextSource::Explanation => explanations
                                .get(&(
                                    row.dataset_id.clone(),
                                    row.model_id.clone(),
                                    row.prompt_id.clone(),
                                    o.sample_id.clone(),
                                ))
                                .cloned()
                                .flatten()
                                .unwrap_or_default(),
                        };
                        if text.trim().is_empty() {
                            tracing::warn!(sample = %o.sample_id, "no text to embed in text-only mode; leaving it out");
                            return Ok::<_, CommandError>(None);
                        }
                        let rec = embed_cached(client, ledger, budget, "text", &text).await?;
                        let v = rec.vector.clone();
                        used.push(rec);
                        (v, text)
                    }
                };
                Ok(Some((
                    GroupMember {
                        sample_id: o.sample_id.clone(),
                        case: o.case,
                        vector,
                        text,
                    },
                    used,
                )))
            }
        }))
        .buffered(client.endpoint().max_inflight)
        .try_collect()
        .await?;
        let mut kept = Vec::new();
        for (m, used) in members.into_iter().flatten() {
            for r in used {
                consumed.push((r.key_hash, serde_json::to_string(&r.vector).expect("vector serializes")));
            }
            kept.push(m);
        }
        let members = kept;

        let mut groups = Vec::new();
        for direction in ErrorDirection::ALL {
            let in_group: Vec<GroupMember> = members.iter().filter(|m| direction.admits(m.case)).cloned().collect();
            groups.push(
                build_group(direction, tcfg.mode, &in_group, &params)
                    .map_err(|e| CommandError::Invalid(e.to_string()))?,
            );
        }
        reports.push(TypologyReport {
            dataset_id: ds_id.clone(),
            model_id: model_id.clone(),
            seed: params.seed,
            groups,
        });
    }
    let dir = cfg.out_dir.join("typology");
    let mut meta = RunMeta::new(
        "typology",
        &cfg.hash(),
        &state_hash(consumed.iter().map(|(k, v)| (k.as_str(), v.as_str()))),
    );
    for r in &reports {
        let stem = format!("{}__{}", file_safe(&r.dataset_id), file_safe(&r.model_id));
        let mut json = serde_json::to_vec_pretty(&TypologyDoc {
            config_hash: &meta.config_hash,
            ledger_state_hash: &meta.ledger_state_hash,
            report: r,
        })
        .expect("report serializes");
        json.push(b'\n');
        meta.emit(&dir, &format!("{stem}.json"), &json).map_err(io_err(&dir))?;
        meta.emit(&dir, &format!("{stem}.txt"), typology_text(&meta, r).as_bytes())
            .map_err(io_err(&dir))?;
    }
    meta.finish(&dir).map_err(io_err(&dir))?;
    Ok(TypologyOutput {
        reports,
        fetched: budget.fetched(),
        out_dir: dir,
    })
}

#[derive(Serialize)]
struct TypologyDoc<'a> {
    config_hash: &'a str,
    ledger_state_hash: &'a str,
    #[serde(flatten)]
    report: &'a TypologyReport,
}

/// One coding in an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub item_id: serde_json::Value,
    pub annotator_id: serde_json::Value,
    pub class_code: serde_json::Value,
}

fn scalar(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub alpha: f64,
    pub alpha_display: String,
    pub n_items: usize,
    pub n_annotators: usize,
    pub n_codings: usize,
}

pub fn agreement_from_annotations(annotations: &[Annotation]) -> Result<AgreementReport, CommandError> {
    let mut items: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut annotators: Vec<String> = Vec::new();
    for a in annotations {
        let (item, who, code) = (scalar(&a.item_id), scalar(&a.annotator_id), scalar(&a.class_code));
        if !annotators.contains(&who) {
            annotators.push(who.clone());
        }
        let slot = items.entry(item.clone()).or_default();
        if let Some(prev) = slot.insert(who.clone(), code.clone()) {
            if prev != code {
                return Err(CommandError::Invalid(format!(
                    "annotator '{who}' coded item '{item}' twice with different codes ({prev} vs {code})"
                )));
            }
        }
    }
    annotators.sort();
    let table: Vec<Vec<Option<String>>> = items
        .values()
        .map(|codes| annotators.iter().map(|a| codes.get(a).cloned()).collect())
        .collect();
    let AgreementResult {
        alpha,
        n_items,
        n_annotators,
    } = krippendorff_alpha(&table).map_err(|e| CommandError::Invalid(e.to_string()))?;
    Ok(AgreementReport {
        alpha,
        alpha_display: format!("{:.3}", memeaudit_core::round_half_up(alpha, 3)),
        n_items,
        n_annotators,
        n_codings: table.iter().flatten().flatten().count(),
    })
}

pub fn cmd_agreement(input: &Path, out: Option<&Path>) -> Result<AgreementReport, CommandError> {
    let annotations: Vec<Annotation> = read_jsonl(
        input,
        "expected one {item_id, annotator_id, class_code} record per line",
    )?;
    let report = agreement_from_annotations(&annotations)?;
    if let Some(out) = out {
        let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
        json.push(b'\n');
        atomic_write(out, &json).map_err(io_err(out))?;
    }
    Ok(report)
}

/// Case shares formatted as in the summary tables.
pub fn case_shares(summary: &AuditSummary) -> Option<[String; 4]> {
    summary.case_percentages.map(|p| p.map(fmt2))
}

/// Cases in an outcome list, counted.
pub fn case_counts(outcomes: &[OutcomeRow]) -> BTreeMap<Case, usize> {
    let mut m = BTreeMap::new();
    for o in outcomes {
        *m.entry(o.outcome.case).or_insert(0) += 1;
    }
    m
}
