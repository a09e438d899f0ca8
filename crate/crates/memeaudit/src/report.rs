//! Report files: atomic writes, CSV and text renderings, run metadata.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use memeaudit_core::audit::{AuditOutcome, AuditSummary};
use memeaudit_core::fmt2;
use memeaudit_core::metrics::{EvalRow, LeaderboardCell, StabilityRow};
use memeaudit_core::prompt::PromptSpec;
use memeaudit_core::typology::{EmbedMode, TypologyReport};
use serde::{Deserialize, Serialize, Serializer};

/// Writes via a sibling temp file and rename, so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Provenance written next to each command's reports as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub config_hash: String,
    pub ledger_state_hash: String,
    /// Report file name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

impl RunMeta {
    pub fn new(command: &str, config_hash: &str, ledger_state_hash: &str) -> Self {
        RunMeta {
            command: command.into(),
            config_hash: config_hash.into(),
            ledger_state_hash: ledger_state_hash.into(),
            files: BTreeMap::new(),
        }
    }

    pub fn header(&self) -> String {
        format!(
            "# memeaudit {}\n# config_hash: {}\n# ledger_state_hash: {}\n",
            self.command, self.config_hash, self.ledger_state_hash
        )
    }

    /// Writes `bytes` to `dir/name` and records its digest.
    pub fn emit(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        atomic_write(&dir.join(name), bytes)?;
        self.files.insert(name.to_string(), crate::sha256_hex(bytes));
        Ok(())
    }

    pub fn finish(&self, dir: &Path) -> std::io::Result<()> {
        let mut json = serde_json::to_vec_pretty(self).expect("meta serializes");
        json.push(b'\n');
        atomic_write(&dir.join("run.json"), &json)
    }
}

fn two_dp<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&fmt2(*v))
}

fn four_dp<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.4}"))
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCsvRow {
    pub dataset_id: String,
    pub model_id: String,
    pub prompt_id: String,
    pub dataset_size: usize,
    #[serde(serialize_with = "two_dp")]
    pub accuracy: f64,
    #[serde(serialize_with = "two_dp")]
    pub macro_f1: f64,
    #[serde(serialize_with = "two_dp")]
    pub accuracy_all: f64,
    #[serde(serialize_with = "two_dp")]
    pub macro_f1_all: f64,
    pub parsed_count: usize,
    pub total_count: usize,
    #[serde(serialize_with = "four_dp")]
    pub support_fraction: f64,
    pub below_threshold: bool,
}

impl From<&EvalRow> for EvalCsvRow {
    fn from(r: &EvalRow) -> Self {
        EvalCsvRow {
            dataset_id: r.dataset_id.clone(),
            model_id: r.model_id.clone(),
            prompt_id: r.prompt.id(),
            dataset_size: r.dataset_size,
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            accuracy_all: r.accuracy_all,
            macro_f1_all: r.macro_f1_all,
            parsed_count: r.support.parsed_count,
            total_count: r.support.total_count,
            support_fraction: r.support.support_fraction,
            below_threshold: r.support.below_threshold,
        }
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialize");
    }
    w.into_inner().expect("in-memory writer")
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>, csv::Error> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    r.deserialize().collect()
}

fn ordered<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

/// Per-model blocks: one row per prompt, `acc mf1` per dataset; `*` marks
/// cells whose parsed fraction is below 90%.
pub fn eval_text(meta: &RunMeta, rows: &[EvalRow]) -> String {
    let mut out = meta.header();
    let datasets = ordered(rows.iter().map(|r| r.dataset_id.as_str()));
    let models = ordered(rows.iter().map(|r| r.model_id.as_str()));
    for model in &models {
        let _ = write!(out, "\nmodel: {model}\n{:<10}", "prompt");
        for d in &datasets {
            let _ = write!(out, " | {:^17}", d);
        }
        out.push('\n');
        let _ = write!(out, "{:<10}", "");
        for _ in &datasets {
            let _ = write!(out, " | {:>8} {:>8}", "acc", "mf1");
        }
        out.push('\n');
        for spec in PromptSpec::ALL {
            let cells: Vec<Option<&EvalRow>> = datasets
                .iter()
                .map(|d| {
                    rows.iter()
                        .find(|r| &r.model_id == model && &r.dataset_id == d && r.prompt == spec)
                })
                .collect();
            if cells.iter().all(Option::is_none) {
                continue;
            }
            let _ = write!(out, "{:<10}", spec.id());
            for c in cells {
                match c {
                    Some(r) => {
                        let flag = if r.support.below_threshold { "*" } else { " " };
                        let _ = write!(out, " | {:>7}{flag} {:>7}{flag}", fmt2(r.accuracy), fmt2(r.macro_f1));
                    }
                    None => {
                        let _ = write!(out, " | {:>8} {:>8}", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
    }
    out.push_str("\n* parsed fraction below 90%; metrics cover parsed outputs only\n");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardCsvRow {
    pub model_id: String,
    pub prompt_id: String,
    #[serde(serialize_with = "two_dp")]
    pub weighted_mf1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCsvRow {
    pub model_id: String,
    #[serde(serialize_with = "two_dp")]
    pub mean: f64,
    #[serde(serialize_with = "two_dp")]
    pub std_dev: f64,
}

/// Prompts as rows, models as columns, then mean and (std) rows.
pub fn leaderboard_text(input_hash: &str, cells: &[LeaderboardCell], stability: &[StabilityRow]) -> String {
    let mut out = format!("# memeaudit leaderboard\n# input_hash: {input_hash}\n\n");
    let models = ordered(cells.iter().map(|c| c.model_id.as_str()));
    let _ = write!(out, "{:<10}", "prompt");
    for m in &models {
        let _ = write!(out, " | {m:>12}");
    }
    out.push('\n');
    for spec in PromptSpec::ALL {
        if !cells.iter().any(|c| c.prompt == spec) {
            continue;
        }
        let _ = write!(out, "{:<10}", spec.id());
        for m in &models {
            let v = cells
                .iter()
                .find(|c| &c.model_id == m && c.prompt == spec)
                .map(|c| fmt2(c.weighted_mf1))
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, " | {v:>12}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<10}", "mean (std)");
    for m in &models {
        let v = stability
            .iter()
            .find(|s| &s.model_id == m)
            .map(|s| format!("{} ({})", fmt2(s.mean), fmt2(s.std_dev)))
            .unwrap_or_else(|| "n/a".into());
        let _ = write!(out, " | {v:>12}");
    }
    out.push('\n');
    out
}

/// Per-sample rows, a blank line, then the case summary.
pub fn audit_csv(outcomes: &[AuditOutcome], summary: &AuditSummary) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    w.write_record(["sample_id", "gold", "original_pred", "case", "flipping_segments"])
        .expect("write");
    for o in outcomes {
        let flips: Vec<String> = o.flipping_segments.iter().map(usize::to_string).collect();
        w.write_record([
            o.sample_id.as_str(),
            &o.gold.to_string(),
            &o.original_pred.to_string(),
            &o.case.number().to_string(),
            &flips.join(";"),
        ])
        .expect("write");
    }
    let mut out = w.into_inner().expect("in-memory writer");
    out.push(b'\n');
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "dataset",
        "model",
        "audited",
        "case1",
        "case2",
        "case3",
        "case4",
        "rigid_pos",
        "rigid_neg",
    ])
    .expect("write");
    w.write_record(summary_fields(summary)).expect("write");
    w.into_inner().expect("in-memory writer")
}

fn mode_id(m: EmbedMode) -> &'static str {
    match m {
        EmbedMode::Multimodal => "multimodal",
        EmbedMode::TextOnly => "text_only",
    }
}

fn flag(b: Option<bool>) -> String {
    b.map(|b| b.to_string()).unwrap_or_else(|| "n/a".into())
}

fn summary_fields(s: &AuditSummary) -> Vec<String> {
    let mut f = vec![s.dataset_id.clone(), s.model_id.clone(), s.audited.to_string()];
    match s.case_percentages {
        Some(p) => f.extend(p.iter().map(|v| fmt2(*v))),
        None => f.extend(std::iter::repeat_n("n/a".to_string(), 4)),
    }
    f.push(flag(s.rigid_pos));
    f.push(flag(s.rigid_neg));
    f
}

/// Summary table across (dataset, model, prompt).
pub fn audit_summary_csv(rows: &[(AuditSummary, String, usize)]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "model",
        "audited",
        "case1",
        "case2",
        "case3",
        "case4",
        "rigid_pos",
        "rigid_neg",
        "prompt_id",
        "skipped",
    ])
    .expect("write");
    for (s, prompt, skipped) in rows {
        let mut f = summary_fields(s);
        f.push(prompt.clone());
        f.push(skipped.to_string());
        w.write_record(&f).expect("write");
    }
    w.into_inner().expect("in-memory writer")
}

/// Datasets as rows; per model the four case shares and the rigidness flags.
pub fn audit_summary_text(meta: &RunMeta, rows: &[(AuditSummary, String, usize)]) -> String {
    let mut out = meta.header();
    let _ = writeln!(
        out,
        "\n{:<10} {:<14} {:<10} {:>7} {:>7} {:>7} {:>7} {:>7}  {:<9} {:<9}",
        "dataset", "model", "prompt", "audited", "CASE 1", "CASE 2", "CASE 3", "CASE 4", "rigid+", "rigid-"
    );
    for (s, prompt, skipped) in rows {
        let pct: Vec<String> = match s.case_percentages {
            Some(p) => p.iter().map(|v| fmt2(*v)).collect(),
            None => vec!["n/a".into(); 4],
        };
        let _ = write!(
            out,
            "{:<10} {:<14} {:<10} {:>7} {:>7} {:>7} {:>7} {:>7}  {:<9} {:<9}",
            s.dataset_id,
            s.model_id,
            prompt,
            s.audited,
            pct[0],
            pct[1],
            pct[2],
            pct[3],
            flag(s.rigid_pos),
            flag(s.rigid_neg)
        );
        if *skipped > 0 {
            let _ = write!(out, " ({skipped} skipped)");
        }
        out.push('\n');
    }
    out
}

pub fn typology_text(meta: &RunMeta, report: &TypologyReport) -> String {
    let mut out = meta.header();
    let _ = writeln!(
        out,
        "\ndataset: {}  model: {}  seed: {}",
        report.dataset_id, report.model_id, report.seed
    );
    for g in &report.groups {
        let _ = writeln!(out, "\n== {} ({}) ==", g.direction.id(), mode_id(g.mode));
        if g.degenerate {
            out.push_str("   (degenerate: fewer than two distinct members)\n");
        }
        if g.terms_empty {
            out.push_str("   (no topic terms: member texts are empty)\n");
        }
        for (i, c) in g.clusters.iter().enumerate() {
            let _ = writeln!(out, "-- cluster {i}: {} members", c.members.len());
            let dist: Vec<String> = c
                .case_distribution
                .iter()
                .enumerate()
                .map(|(k, v)| format!("CASE {}: {}%", k + 1, fmt2(*v)))
                .collect();
            let _ = writeln!(out, "   cases: {}", dist.join(", "));
            let terms: Vec<String> = c.terms.iter().map(|t| format!("{} ({:.3})", t.term, t.score)).collect();
            let _ = writeln!(
                out,
                "   topic words: {}",
                if terms.is_empty() { "-".into() } else { terms.join(", ") }
            );
            let _ = writeln!(out, "   representatives: {}", c.representatives.join(", "));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.txt");
        atomic_write(&p, b"first").unwrap();
        atomic_write(&p, b"second").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"second");
        let leftovers = std::fs::read_dir(p.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }

    #[test]
    fn eval_csv_round_trips_two_decimals() {
        let row = EvalCsvRow {
            dataset_id: "fhm".into(),
            model_id: "m".into(),
            prompt_id: "vn-vn".into(),
            dataset_size: 500,
            accuracy: 69.9475,
            macro_f1: 68.0249,
            accuracy_all: 60.0,
            macro_f1_all: 59.0,
            parsed_count: 450,
            total_count: 500,
            support_fraction: 0.9,
            below_threshold: false,
        };
        let bytes = to_csv(&[row]);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("69.95,68.02,60.00,59.00,450,500,0.9000,false"), "{text}");
        let back: Vec<EvalCsvRow> = read_csv(&bytes).unwrap();
        assert_eq!(back[0].macro_f1, 68.02);
    }
}
