//! TOML run configuration.
//!
//! Relative paths are resolved against the config file's directory.
//! [`RunConfig::validate`] reports every problem at once, before any
//! network traffic.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use memeaudit_core::corpus::LabelSchema;
use memeaudit_core::prompt::PromptSpec;
use memeaudit_core::typology::{EmbedMode, DEFAULT_REPRESENTATIVES, DEFAULT_SEED, DEFAULT_TOP_TERMS};
use serde::{Deserialize, Serialize};

use crate::client::ModelEndpoint;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration error(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: String,
    pub manifest: PathBuf,
    /// Built-in schema id; defaults to `id`. Ignored when `label_schema` is set.
    #[serde(default)]
    pub schema: Option<String>,
    #[serde(default)]
    pub label_schema: Option<LabelSchema>,
    /// Keep this many samples per class (seeded). All samples when absent.
    #[serde(default)]
    pub per_class_quota: Option<usize>,
}

impl DatasetConfig {
    pub fn resolve_schema(&self) -> Result<LabelSchema, String> {
        let schema = match &self.label_schema {
            Some(s) => s.clone(),
            None => {
                let id = self.schema.as_deref().unwrap_or(&self.id);
                LabelSchema::builtin(id).map_err(|e| format!("dataset '{}': {e}", self.id))?
            }
        };
        schema.validate().map_err(|e| format!("dataset '{}': {e}", self.id))?;
        Ok(schema)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Fixed prompt id; otherwise each model's best weighted-macro-F1 prompt.
    #[serde(default)]
    pub prompt: Option<String>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            enabled: true,
            prompt: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    Ocr,
    Explanation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypologyConfig {
    /// Validate the embedder up front. `memeaudit typology` needs one regardless.
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub embedder: Option<ModelEndpoint>,
    #[serde(default = "multimodal")]
    pub mode: EmbedMode,
    /// Text embedded in text-only mode.
    #[serde(default = "ocr")]
    pub text_source: TextSource,
    #[serde(default = "seed")]
    pub seed: u64,
    #[serde(default = "top_terms")]
    pub top_terms: usize,
    #[serde(default = "representatives")]
    pub representatives: usize,
}

impl Default for TypologyConfig {
    fn default() -> Self {
        TypologyConfig {
            enabled: false,
            embedder: None,
            mode: EmbedMode::Multimodal,
            text_source: TextSource::Ocr,
            seed: DEFAULT_SEED,
            top_terms: DEFAULT_TOP_TERMS,
            representatives: DEFAULT_REPRESENTATIVES,
        }
    }
}

fn yes() -> bool {
    true
}
fn multimodal() -> EmbedMode {
    EmbedMode::Multimodal
}
fn ocr() -> TextSource {
    TextSource::Ocr
}
fn seed() -> u64 {
    DEFAULT_SEED
}
fn top_terms() -> usize {
    DEFAULT_TOP_TERMS
}
fn representatives() -> usize {
    DEFAULT_REPRESENTATIVES
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_ledger() -> PathBuf {
    PathBuf::from("ledger")
}
fn all_prompts() -> Vec<String> {
    PromptSpec::ALL.iter().map(PromptSpec::id).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_ledger")]
    pub ledger_dir: PathBuf,
    /// Seed for per-class subsampling.
    #[serde(default = "seed")]
    pub subsample_seed: u64,
    #[serde(default = "all_prompts")]
    pub prompts: Vec<String>,
    #[serde(default)]
    pub datasets: Vec<DatasetConfig>,
    #[serde(default)]
    pub endpoints: Vec<ModelEndpoint>,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub typology: TypologyConfig,
}

/// Command-line values that replace file values when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub ledger_dir: Option<PathBuf>,
    pub prompts: Option<Vec<String>>,
    pub audit_prompt: Option<String>,
    pub typology_seed: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigErrors> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigErrors(vec![e.to_string()]))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigErrors(vec![format!("reading config {}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.ledger_dir);
        for d in &mut self.datasets {
            fix(&mut d.manifest);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.out_dir {
            self.out_dir = p.clone();
        }
        if let Some(p) = &o.ledger_dir {
            self.ledger_dir = p.clone();
        }
        if let Some(p) = &o.prompts {
            self.prompts = p.clone();
        }
        if let Some(p) = &o.audit_prompt {
            self.audit.prompt = Some(p.clone());
        }
        if let Some(s) = o.typology_seed {
            self.typology.seed = s;
        }
    }

    /// Prompt specs in configured order. Call after [`validate`](Self::validate).
    pub fn prompt_specs(&self) -> Vec<PromptSpec> {
        self.prompts.iter().filter_map(|p| p.parse().ok()).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errs = Vec::new();
        if self.datasets.is_empty() {
            errs.push("at least one [[datasets]] entry is required".to_string());
        }
        if self.endpoints.is_empty() {
            errs.push("at least one [[endpoints]] entry is required".to_string());
        }
        let mut seen = BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.id.as_str()) {
                errs.push(format!("dataset id '{}' is repeated", d.id));
            }
            if let Err(e) = d.resolve_schema() {
                errs.push(e);
            }
            if !d.manifest.is_file() {
                errs.push(format!(
                    "dataset '{}': manifest {} does not exist",
                    d.id,
                    d.manifest.display()
                ));
            }
            if d.per_class_quota == Some(0) {
                errs.push(format!("dataset '{}': per_class_quota must be at least 1", d.id));
            }
        }
        let mut seen = BTreeSet::new();
        for e in &self.endpoints {
            if !seen.insert(e.id.as_str()) {
                errs.push(format!("endpoint id '{}' is repeated", e.id));
            }
            errs.extend(e.validate());
        }
        if self.prompts.is_empty() {
            errs.push("prompts must list at least one prompt id".to_string());
        }
        let mut seen = BTreeSet::new();
        for p in &self.prompts {
            match p.parse::<PromptSpec>() {
                Ok(spec) => {
                    if !seen.insert(spec) {
                        errs.push(format!("prompt '{p}' is listed twice"));
                    }
                }
                Err(e) => errs.push(e.to_string()),
            }
        }
        if let Some(p) = &self.audit.prompt {
            if let Err(e) = p.parse::<PromptSpec>() {
                errs.push(format!("audit.prompt: {e}"));
            }
        }
        if self.typology.enabled {
            match &self.typology.embedder {
                Some(e) => errs.extend(e.validate().into_iter().map(|m| format!("typology.embedder: {m}"))),
                None => errs.push("typology.embedder must be set when typology is enabled".to_string()),
            }
            if self.typology.top_terms == 0 {
                errs.push("typology.top_terms must be at least 1".to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }

    /// SHA-256 of the resolved configuration, minus where outputs and the
    /// ledger live.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.ledger_dir = PathBuf::new();
        crate::sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}
