//! Label schemas, meme samples and dataset manifests.
//!
//! A [`LabelSchema`] carries the two label words a model is asked to choose
//! between, their one-line definitions, and a merge map from the raw label
//! strings a dataset ships with onto [`Polarity`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Binary task label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn flip(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }

    /// Single-letter code used in compact reports.
    pub fn code(self) -> char {
        match self {
            Polarity::Positive => 'P',
            Polarity::Negative => 'N',
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("label schema `{0}`: label names must be non-empty")]
    EmptyLabelName(String),
    #[error("label schema `{dataset}`: `{positive}` and `{negative}` normalize to the same label")]
    IndistinctLabels {
        dataset: String,
        positive: String,
        negative: String,
    },
    #[error("label schema `{dataset}`: raw label `{raw}` is mapped to both polarities")]
    ConflictingMerge { dataset: String, raw: String },
    #[error("unknown label `{raw}` for dataset `{dataset}`")]
    UnknownLabel { dataset: String, raw: String },
    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),
    #[error("manifest for `{0}` has no samples")]
    EmptyManifest(String),
    #[error("quota {quota} exceeds the {available} {polarity} samples available")]
    QuotaExceedsPopulation {
        quota: usize,
        available: usize,
        polarity: Polarity,
    },
    #[error("no built-in label schema named `{0}`")]
    UnknownSchema(String),
}

/// Lowercases and collapses runs of hyphens, underscores and whitespace
/// into single spaces, trimming the ends.
pub fn normalize_label(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch == '-' || ch == '_' || ch.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(ch.to_lowercase());
    }
    out
}

/// Label words, definitions and raw-label merge map for one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub dataset_id: String,
    pub positive_name: String,
    pub negative_name: String,
    pub positive_definition: String,
    pub negative_definition: String,
    /// Extra raw labels (normalized form) accepted in manifests. The two
    /// label names always map to their own polarity and need not be listed.
    #[serde(default)]
    pub merge: BTreeMap<String, Polarity>,
}

impl LabelSchema {
    pub fn new(
        dataset_id: impl Into<String>,
        positive_name: impl Into<String>,
        negative_name: impl Into<String>,
        positive_definition: impl Into<String>,
        negative_definition: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let schema = LabelSchema {
            dataset_id: dataset_id.into(),
            positive_name: positive_name.into(),
            negative_name: negative_name.into(),
            positive_definition: positive_definition.into(),
            negative_definition: negative_definition.into(),
            merge: BTreeMap::new(),
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Adds a raw label alias, e.g. `"very harmful" -> Positive`.
    pub fn with_alias(mut self, raw: &str, polarity: Polarity) -> Self {
        self.merge.insert(normalize_label(raw), polarity);
        self
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let pos = normalize_label(&self.positive_name);
        let neg = normalize_label(&self.negative_name);
        if pos.is_empty() || neg.is_empty() {
            return Err(CorpusError::EmptyLabelName(self.dataset_id.clone()));
        }
        if pos == neg {
            return Err(CorpusError::IndistinctLabels {
                dataset: self.dataset_id.clone(),
                positive: self.positive_name.clone(),
                negative: self.negative_name.clone(),
            });
        }
        for (raw, polarity) in &self.merge {
            let raw = normalize_label(raw);
            let clashes =
                (raw == pos && *polarity != Polarity::Positive) || (raw == neg && *polarity != Polarity::Negative);
            if clashes {
                return Err(CorpusError::ConflictingMerge {
                    dataset: self.dataset_id.clone(),
                    raw,
                });
            }
        }
        Ok(())
    }

    pub fn name(&self, polarity: Polarity) -> &str {
        match polarity {
            Polarity::Positive => &self.positive_name,
            Polarity::Negative => &self.negative_name,
        }
    }

    pub fn definition(&self, polarity: Polarity) -> &str {
        match polarity {
            Polarity::Positive => &self.positive_definition,
            Polarity::Negative => &self.negative_definition,
        }
    }

    /// Maps a raw dataset label onto a polarity. Undeclared labels are errors.
    pub fn map_raw_label(&self, raw: &str) -> Result<Polarity, CorpusError> {
        let key = normalize_label(raw);
        if key == normalize_label(&self.positive_name) {
            return Ok(Polarity::Positive);
        }
        if key == normalize_label(&self.negative_name) {
            return Ok(Polarity::Negative);
        }
        self.merge.get(&key).copied().ok_or_else(|| CorpusError::UnknownLabel {
            dataset: self.dataset_id.clone(),
            raw: raw.to_string(),
        })
    }

    /// Every raw label this schema accepts, normalized, with its polarity.
    pub fn declared_labels(&self) -> BTreeMap<String, Polarity> {
        let mut all = self.merge.clone();
        all.insert(normalize_label(&self.positive_name), Polarity::Positive);
        all.insert(normalize_label(&self.negative_name), Polarity::Negative);
        all
    }

    /// Looks up one of the six built-in dataset schemas by id
    /// (`fhm`, `mami`, `harm-c`, `harm-p`, `bhm`, `hinglish`).
    pub fn builtin(id: &str) -> Result<Self, CorpusError> {
        let id = normalize_label(id);
        let schema = match id.as_str() {
            "fhm" => builtin_schema("fhm", "hateful", "not-hateful", FHM_POSITIVE, FHM_NEGATIVE),
            "mami" => builtin_schema("mami", "misogynistic", "not-misogynistic", MAMI_POSITIVE, MAMI_NEGATIVE)
                .with_alias("misogynous", Polarity::Positive)
                .with_alias("not misogynous", Polarity::Negative),
            "harm c" | "harm p" => {
                let dataset = if id == "harm c" { "harm-c" } else { "harm-p" };
                builtin_schema(dataset, "harmful", "not-harmful", HARM_POSITIVE, HARM_NEGATIVE)
                    .with_alias("somewhat harmful", Polarity::Positive)
                    .with_alias("very harmful", Polarity::Positive)
            }
            "bhm" => builtin_schema("bhm", "hateful", "not-hateful", BHM_POSITIVE, BHM_NEGATIVE),
            "hinglish" => builtin_schema(
                "hinglish",
                "offensive",
                "not-offensive",
                HINGLISH_POSITIVE,
                HINGLISH_NEGATIVE,
            ),
            _ => return Err(CorpusError::UnknownSchema(id)),
        };
        Ok(schema)
    }

    pub const BUILTIN_IDS: [&'static str; 6] = ["fhm", "mami", "harm-c", "harm-p", "bhm", "hinglish"];
}

fn builtin_schema(id: &str, pos: &str, neg: &str, pos_def: &str, neg_def: &str) -> LabelSchema {
    LabelSchema {
        dataset_id: id.to_string(),
        positive_name: pos.to_string(),
        negative_name: neg.to_string(),
        positive_definition: pos_def.to_string(),
        negative_definition: neg_def.to_string(),
        merge: BTreeMap::new(),
    }
}

const FHM_POSITIVE: &str = "A direct or indirect attack on people based on characteristics, including ethnicity, race, nationality, immigration status, religion, caste, sex, gender identity, sexual orientation, and disability or disease. Attack is defined as violent or dehumanizing (comparing people to non-human things, e.g., animals) speech, statements of inferiority, and calls for exclusion or segregation. Mocking hate crime is also considered hateful.";
const FHM_NEGATIVE: &str = "A meme which is not hateful and follows social norms.";
const MAMI_POSITIVE: &str = "A meme is misogynous if it conceptually describes an offensive, sexist or hateful scene (weak or strong, implicitly or explicitly) having as target a woman or a group of women. Misogyny can be expressed in the form of shaming, stereotype, objectification and/or violence.";
const MAMI_NEGATIVE: &str = "A meme that does not express any form of hate against women.";
const HARM_POSITIVE: &str = "Multi-modal units consisting of an image and a piece of text embedded that has the potential to cause harm to an individual, an organization, a community, or civil society more generally. Here, harm includes mental abuse, defamation, psycho-physiological injury, proprietary damage, emotional disturbance, and compensated public image.";
const HARM_NEGATIVE: &str = "Multi-modal units consisting of an image and a piece of text embedded that does not cause any harm to an individual, an organization, a community, or society more generally.";
const BHM_POSITIVE: &str = "If it explicitly intends to denigrate, vilify, harm, mock, abuse any entity based on their gender, race, ideology, belief, social, political, geographical and organizational status.";
const BHM_NEGATIVE: &str = "If it is not hateful and follows social norms. community, or the society more generally.";
const HINGLISH_POSITIVE: &str = "A meme will be categorized as offensive if it either explicitly or implicitly dehumanizes, degrades, insults, or attacks any individual or group based on attributes, such as gender, nationality, sexual orientation, ethnicity, race, skin color, health condition.";
const HINGLISH_NEGATIVE: &str = "A meme that is not offensive and follows social norms.";

/// One meme: image reference, pre-extracted OCR text and gold polarity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemeSample {
    pub sample_id: String,
    /// Image path as written in the manifest, relative to the manifest file.
    pub image_ref: String,
    pub ocr_text: String,
    pub gold: Polarity,
}

/// An ordered, validated collection of samples sharing one schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: LabelSchema,
    samples: Vec<MemeSample>,
}

impl DatasetManifest {
    pub fn new(schema: LabelSchema, samples: Vec<MemeSample>) -> Result<Self, CorpusError> {
        schema.validate()?;
        if samples.is_empty() {
            return Err(CorpusError::EmptyManifest(schema.dataset_id.clone()));
        }
        let mut seen = alloc::collections::BTreeSet::new();
        for sample in &samples {
            if !seen.insert(sample.sample_id.as_str()) {
                return Err(CorpusError::DuplicateSample(sample.sample_id.clone()));
            }
        }
        Ok(DatasetManifest { schema, samples })
    }

    pub fn samples(&self) -> &[MemeSample] {
        &self.samples
    }

    /// |D|, the dataset size used to weight the leaderboard.
    pub fn size(&self) -> usize {
        self.samples.len()
    }

    pub fn dataset_id(&self) -> &str {
        &self.schema.dataset_id
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        self.samples.iter().filter(|s| s.gold == polarity).count()
    }

    pub fn get(&self, sample_id: &str) -> Option<&MemeSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }
}

/// How many samples of each polarity [`subsample`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quota {
    All,
    PerClass(usize),
}

/// Draws exactly `quota` samples per polarity with a seeded generator.
///
/// Selected samples keep their original relative order.
pub fn subsample(manifest: &DatasetManifest, quota: Quota, seed: u64) -> Result<DatasetManifest, CorpusError> {
    let per_class = match quota {
        Quota::All => return Ok(manifest.clone()),
        Quota::PerClass(n) => n,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = alloc::vec![false; manifest.samples.len()];
    for polarity in [Polarity::Positive, Polarity::Negative] {
        let members: Vec<usize> = manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.gold == polarity)
            .map(|(i, _)| i)
            .collect();
        if per_class > members.len() {
            return Err(CorpusError::QuotaExceedsPopulation {
                quota: per_class,
                available: members.len(),
                polarity,
            });
        }
        for pick in rand::seq::index::sample(&mut rng, members.len(), per_class).iter() {
            keep[members[pick]] = true;
        }
    }
    let samples = manifest
        .samples
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(s, _)| s.clone())
        .collect();
    DatasetManifest::new(manifest.schema.clone(), samples)
}
