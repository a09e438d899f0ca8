//! Occlusion case taxonomy for misclassified memes.
//!
//! A misclassified meme is re-queried once per occluded superpixel. If any
//! occlusion flips the model to the gold label the meme is Case 1 (wrongly
//! positive) or Case 3 (wrongly negative); otherwise Case 2 or Case 4.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Polarity;
use crate::parse::ParsedPrediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    /// Wrongly positive; some occlusion yields the negative label.
    Case1,
    /// Wrongly positive under every occlusion.
    Case2,
    /// Wrongly negative; some occlusion yields the positive label.
    Case3,
    /// Wrongly negative under every occlusion.
    Case4,
}

impl Case {
    pub const ALL: [Case; 4] = [Case::Case1, Case::Case2, Case::Case3, Case::Case4];

    /// 1-based case number.
    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn index(self) -> usize {
        match self {
            Case::Case1 => 0,
            Case::Case2 => 1,
            Case::Case3 => 2,
            Case::Case4 => 3,
        }
    }

    /// The (wrong) label the model gave the unoccluded meme.
    pub fn original_pred(self) -> Polarity {
        match self {
            Case::Case1 | Case::Case2 => Polarity::Positive,
            Case::Case3 | Case::Case4 => Polarity::Negative,
        }
    }

    pub fn is_flip(self) -> bool {
        matches!(self, Case::Case1 | Case::Case3)
    }

    pub fn from_number(n: u8) -> Option<Case> {
        Case::ALL.get((n as usize).checked_sub(1)?).copied()
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CASE {}", self.number())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("original prediction was ambiguous; sample is not auditable")]
    AmbiguousOriginal,
    #[error("original prediction matches gold; only misclassifications are audited")]
    NotMisclassified,
    #[error("no occluded predictions supplied")]
    NoOcclusions,
}

/// Assigns the case and lists the segment ids whose occlusion produced the
/// gold label. Ambiguous occluded predictions never count as flips.
pub fn classify_case(
    gold: Polarity,
    original_pred: Option<Polarity>,
    occluded: &[Option<Polarity>],
) -> Result<(Case, Vec<usize>), AuditError> {
    let original = original_pred.ok_or(AuditError::AmbiguousOriginal)?;
    if original == gold {
        return Err(AuditError::NotMisclassified);
    }
    if occluded.is_empty() {
        return Err(AuditError::NoOcclusions);
    }
    let flips: Vec<usize> = occluded
        .iter()
        .enumerate()
        .filter(|(_, p)| **p == Some(gold))
        .map(|(i, _)| i)
        .collect();
    let case = match (original, flips.is_empty()) {
        (Polarity::Positive, false) => Case::Case1,
        (Polarity::Positive, true) => Case::Case2,
        (Polarity::Negative, false) => Case::Case3,
        (Polarity::Negative, true) => Case::Case4,
    };
    Ok((case, flips))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditOutcome {
    pub sample_id: String,
    pub gold: Polarity,
    pub original_pred: Polarity,
    pub case: Case,
    pub flipping_segments: Vec<usize>,
    /// Indexed by segment id.
    pub occluded_preds: Vec<(usize, ParsedPrediction)>,
}

impl AuditOutcome {
    /// `occluded[i]` is the parsed response for segment `i`.
    pub fn new(
        sample_id: impl Into<String>,
        gold: Polarity,
        original_pred: Option<Polarity>,
        occluded: Vec<ParsedPrediction>,
    ) -> Result<Self, AuditError> {
        let labels: Vec<Option<Polarity>> = occluded.iter().map(|p| p.label).collect();
        let (case, flipping_segments) = classify_case(gold, original_pred, &labels)?;
        Ok(AuditOutcome {
            sample_id: sample_id.into(),
            gold,
            original_pred: case.original_pred(),
            case,
            flipping_segments,
            occluded_preds: occluded.into_iter().enumerate().collect(),
        })
    }

    /// Number of occluded responses that did not yield a clean label.
    pub fn ambiguous_occlusions(&self) -> usize {
        self.occluded_preds.iter().filter(|(_, p)| p.label.is_none()).count()
    }
}

/// Case percentages over the audited samples of one (dataset, model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub dataset_id: String,
    pub model_id: String,
    pub audited: usize,
    pub case_counts: [usize; 4],
    /// `None` when nothing was audited.
    pub case_percentages: Option<[f64; 4]>,
    /// Case 2 share exceeds Case 1 share.
    pub rigid_pos: Option<bool>,
    /// Case 4 share exceeds Case 3 share.
    pub rigid_neg: Option<bool>,
}

impl AuditSummary {
    pub fn from_outcomes(dataset_id: &str, model_id: &str, outcomes: &[AuditOutcome]) -> Self {
        let mut counts = [0usize; 4];
        for o in outcomes {
            counts[o.case.index()] += 1;
        }
        let total = outcomes.len();
        let pct = (total > 0).then(|| counts.map(|c| c as f64 * 100.0 / total as f64));
        let mut summary = Self::from_percentages(dataset_id, model_id, pct);
        summary.audited = total;
        summary.case_counts = counts;
        summary
    }

    /// Summary from published or precomputed percentages.
    pub fn from_percentages(dataset_id: &str, model_id: &str, pct: Option<[f64; 4]>) -> Self {
        AuditSummary {
            dataset_id: dataset_id.into(),
            model_id: model_id.into(),
            audited: 0,
            case_counts: [0; 4],
            case_percentages: pct,
            rigid_pos: pct.map(|p| p[1] > p[0]),
            rigid_neg: pct.map(|p| p[3] > p[2]),
        }
    }

    pub fn is_undefined(&self) -> bool {
        self.case_percentages.is_none()
    }
}
