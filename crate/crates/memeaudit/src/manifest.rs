//! Line-delimited dataset manifests: one `{id, image, ocr, label}` record per line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use memeaudit_core::corpus::{CorpusError, DatasetManifest, LabelSchema, MemeSample};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest {0} not found")]
    Missing(PathBuf),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: image {image} does not exist")]
    UnresolvableImage { path: PathBuf, line: usize, image: PathBuf },
    #[error("{path}:{line}: {source}")]
    Label {
        path: PathBuf,
        line: usize,
        source: CorpusError,
    },
    #[error("{path}: {source}")]
    Corpus { path: PathBuf, source: CorpusError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    #[serde(default)]
    pub ocr: String,
    pub label: String,
}

/// A manifest together with the directory its image paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedManifest {
    pub manifest: DatasetManifest,
    pub base_dir: PathBuf,
}

impl LoadedManifest {
    pub fn image_path(&self, sample: &MemeSample) -> PathBuf {
        self.base_dir.join(&sample.image_ref)
    }
}

pub fn load_manifest(path: &Path, schema: LabelSchema) -> Result<LoadedManifest, ManifestError> {
    if !path.exists() {
        return Err(ManifestError::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| ManifestError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let image = base_dir.join(&record.image);
        if !image.is_file() {
            return Err(ManifestError::UnresolvableImage {
                path: path.to_path_buf(),
                line: line_no,
                image,
            });
        }
        let gold = schema
            .map_raw_label(&record.label)
            .map_err(|source| ManifestError::Label {
                path: path.to_path_buf(),
                line: line_no,
                source,
            })?;
        samples.push(MemeSample {
            sample_id: record.id,
            image_ref: record.image,
            ocr_text: record.ocr,
            gold,
        });
    }
    let manifest = DatasetManifest::new(schema, samples).map_err(|source| ManifestError::Corpus {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(LoadedManifest { manifest, base_dir })
}

/// Writes `manifest` with each gold label spelled as the schema's label name.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> std::io::Result<()> {
    let mut out = Vec::new();
    for s in manifest.samples() {
        let record = ManifestRecord {
            id: s.sample_id.clone(),
            image: s.image_ref.clone(),
            ocr: s.ocr_text.clone(),
            label: manifest.schema.name(s.gold).to_string(),
        };
        serde_json::to_writer(&mut out, &record).map_err(std::io::Error::other)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)
}
