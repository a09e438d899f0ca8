//! Classification metrics, the size-weighted leaderboard score, stability
//! across prompt variants, and Krippendorff's alpha for nominal codings.
//!
//! All scores are returned as percentages in `[0, 100]` and are never
//! rounded; use [`crate::fmt2`] for display.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Polarity;
use crate::parse::SupportStat;
use crate::prompt::PromptSpec;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("metric input is empty")]
    Empty,
    #[error("gold has {gold} labels but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("dataset size must be positive")]
    ZeroSize,
    #[error("stability needs one value per prompt variant; missing {0}")]
    MissingVariant(PromptSpec),
    #[error("prompt variant {0} given more than once")]
    DuplicateVariant(PromptSpec),
    #[error("agreement needs at least two annotators, got {0}")]
    TooFewAnnotators(usize),
    #[error("no item has two or more codings to pair")]
    NoPairableCodings,
}

/// Binary confusion counts with Positive as the reference class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
    /// Gold items whose prediction was missing (ambiguous).
    pub abstained_pos: usize,
    pub abstained_neg: usize,
}

impl Confusion {
    pub fn tally(gold: &[Polarity], pred: &[Option<Polarity>]) -> Result<Self, MetricsError> {
        if gold.len() != pred.len() {
            return Err(MetricsError::LengthMismatch {
                gold: gold.len(),
                pred: pred.len(),
            });
        }
        let mut c = Confusion::default();
        for (g, p) in gold.iter().zip(pred) {
            match (g, p) {
                (Polarity::Positive, Some(Polarity::Positive)) => c.true_pos += 1,
                (Polarity::Positive, Some(Polarity::Negative)) => c.false_neg += 1,
                (Polarity::Negative, Some(Polarity::Negative)) => c.true_neg += 1,
                (Polarity::Negative, Some(Polarity::Positive)) => c.false_pos += 1,
                (Polarity::Positive, None) => c.abstained_pos += 1,
                (Polarity::Negative, None) => c.abstained_neg += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg + self.abstained_pos + self.abstained_neg
    }

    /// F1 of one class; 0 when the class is absent from gold and predictions.
    pub fn f1(&self, class: Polarity) -> f64 {
        let (tp, fp, fn_) = match class {
            Polarity::Positive => (self.true_pos, self.false_pos, self.false_neg + self.abstained_pos),
            Polarity::Negative => (self.true_neg, self.false_neg, self.false_pos + self.abstained_neg),
        };
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    }

    pub fn accuracy_pct(&self) -> f64 {
        100.0 * (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }

    pub fn macro_f1_pct(&self) -> f64 {
        100.0 * (self.f1(Polarity::Positive) + self.f1(Polarity::Negative)) / 2.0
    }
}

/// Accuracy and macro-F1 (percentages) over fully parsed predictions.
pub fn accuracy_macro_f1(gold: &[Polarity], pred: &[Polarity]) -> Result<(f64, f64), MetricsError> {
    let pred: Vec<Option<Polarity>> = pred.iter().copied().map(Some).collect();
    accuracy_macro_f1_with_abstentions(gold, &pred)
}

/// Accuracy and macro-F1 where `None` predictions count as wrong for
/// every class (the all-samples convention).
pub fn accuracy_macro_f1_with_abstentions(
    gold: &[Polarity],
    pred: &[Option<Polarity>],
) -> Result<(f64, f64), MetricsError> {
    let c = Confusion::tally(gold, pred)?;
    if c.total() == 0 {
        return Err(MetricsError::Empty);
    }
    Ok((c.accuracy_pct(), c.macro_f1_pct()))
}

/// One (dataset, model, prompt) cell of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset_id: alloc::string::String,
    pub model_id: alloc::string::String,
    pub prompt: PromptSpec,
    /// |D| of the evaluated dataset.
    pub dataset_size: usize,
    /// Over parsed predictions only; 0 when nothing parsed.
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Over all samples with ambiguous outputs counted wrong.
    pub accuracy_all: f64,
    pub macro_f1_all: f64,
    pub support: SupportStat,
}

impl EvalRow {
    pub fn compute(
        dataset_id: &str,
        model_id: &str,
        prompt: PromptSpec,
        gold: &[Polarity],
        pred: &[Option<Polarity>],
        support: SupportStat,
    ) -> Result<Self, MetricsError> {
        let (accuracy_all, macro_f1_all) = accuracy_macro_f1_with_abstentions(gold, pred)?;
        let (parsed_gold, parsed_pred): (Vec<Polarity>, Vec<Polarity>) =
            gold.iter().zip(pred).filter_map(|(g, p)| p.map(|p| (*g, p))).unzip();
        let (accuracy, macro_f1) = if parsed_gold.is_empty() {
            (0.0, 0.0)
        } else {
            accuracy_macro_f1(&parsed_gold, &parsed_pred)?
        };
        Ok(EvalRow {
            dataset_id: dataset_id.into(),
            model_id: model_id.into(),
            prompt,
            dataset_size: gold.len(),
            accuracy,
            macro_f1,
            accuracy_all,
            macro_f1_all,
            support,
        })
    }
}

/// Size-weighted macro-F1: `sum(f_D * |D|) / sum(|D|)`.
pub fn weighted_mf1(rows: &[(f64, usize)]) -> Result<f64, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    if rows.iter().any(|(_, size)| *size == 0) {
        return Err(MetricsError::ZeroSize);
    }
    let total: usize = rows.iter().map(|(_, size)| size).sum();
    let weighted: f64 = rows.iter().map(|(f, size)| f * *size as f64).sum();
    Ok(weighted / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardCell {
    pub model_id: alloc::string::String,
    pub prompt: PromptSpec,
    pub weighted_mf1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub model_id: alloc::string::String,
    pub mean: f64,
    /// Population standard deviation (divides by N).
    pub std_dev: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, libm::sqrt(var)))
}

/// Mean and population std over exactly one value per prompt variant.
pub fn stability(model_id: &str, cells: &[(PromptSpec, f64)]) -> Result<StabilityRow, MetricsError> {
    let mut by_spec: BTreeMap<PromptSpec, f64> = BTreeMap::new();
    for (spec, value) in cells {
        if by_spec.insert(*spec, *value).is_some() {
            return Err(MetricsError::DuplicateVariant(*spec));
        }
    }
    if let Some(missing) = PromptSpec::ALL.iter().find(|s| !by_spec.contains_key(s)) {
        return Err(MetricsError::MissingVariant(*missing));
    }
    let values: Vec<f64> = PromptSpec::ALL.iter().map(|s| by_spec[s]).collect();
    let (mean, std_dev) = mean_std(&values)?;
    Ok(StabilityRow {
        model_id: model_id.into(),
        mean,
        std_dev,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    pub alpha: f64,
    pub n_items: usize,
    pub n_annotators: usize,
}

/// Krippendorff's alpha for nominal data via the coincidence matrix.
///
/// `table[item][annotator]` holds that annotator's code or `None` when
/// missing. Items with fewer than two codings are not pairable and are
/// ignored. With zero observed disagreement alpha is 1, including the
/// degenerate case where every coding uses the same value.
pub fn krippendorff_alpha<L: Ord + Clone>(table: &[Vec<Option<L>>]) -> Result<AgreementResult, MetricsError> {
    let n_annotators = table.iter().map(Vec::len).max().unwrap_or(0);
    if n_annotators < 2 {
        return Err(MetricsError::TooFewAnnotators(n_annotators));
    }

    let mut values: BTreeMap<L, usize> = BTreeMap::new();
    for code in table.iter().flatten().flatten() {
        let next = values.len();
        values.entry(code.clone()).or_insert(next);
    }
    let k = values.len();
    // coincidences[c][d], accumulated per item as counts / (m_u - 1).
    let mut coincidences = alloc::vec![0.0f64; k * k];
    let mut n_items = 0;
    for item in table {
        let mut counts = alloc::vec![0usize; k];
        let mut m = 0usize;
        for code in item.iter().flatten() {
            counts[values[code]] += 1;
            m += 1;
        }
        if m < 2 {
            continue;
        }
        n_items += 1;
        let scale = 1.0 / (m - 1) as f64;
        for c in 0..k {
            for d in 0..k {
                let pairs = if c == d {
                    counts[c] * counts[c].saturating_sub(1)
                } else {
                    counts[c] * counts[d]
                };
                coincidences[c * k + d] += pairs as f64 * scale;
            }
        }
    }
    if n_items == 0 {
        return Err(MetricsError::NoPairableCodings);
    }

    let marginals: Vec<f64> = (0..k).map(|c| (0..k).map(|d| coincidences[c * k + d]).sum()).collect();
    let n: f64 = marginals.iter().sum();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..k {
        for d in 0..k {
            if c != d {
                observed += coincidences[c * k + d];
                expected += marginals[c] * marginals[d];
            }
        }
    }
    let alpha = if observed == 0.0 {
        1.0
    } else {
        1.0 - (n - 1.0) * observed / expected
    };
    Ok(AgreementResult {
        alpha,
        n_items,
        n_annotators,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Polarity::{Negative as N, Positive as P};
    use alloc::vec;

    /// Independent F1 route: precision/recall per class from explicit counting.
    fn oracle(gold: &[Polarity], pred: &[Polarity]) -> (f64, f64) {
        let n = gold.len() as f64;
        let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64;
        let mut f1s = [0.0; 2];
        for (slot, class) in [P, N].into_iter().enumerate() {
            let tp = gold
                .iter()
                .zip(pred)
                .filter(|(g, p)| **g == class && **p == class)
                .count() as f64;
            let predicted = pred.iter().filter(|p| **p == class).count() as f64;
            let actual = gold.iter().filter(|g| **g == class).count() as f64;
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = if actual > 0.0 { tp / actual } else { 0.0 };
            f1s[slot] = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
        }
        (100.0 * correct / n, 50.0 * (f1s[0] + f1s[1]))
    }

    #[test]
    fn worked_example() {
        let (acc, mf1) = accuracy_macro_f1(&[P, P, N, N], &[P, N, N, N]).unwrap();
        assert_eq!(crate::fmt2(acc), "75.00");
        assert_eq!(crate::fmt2(mf1), "73.33");
        let (oacc, omf1) = oracle(&[P, P, N, N], &[P, N, N, N]);
        assert!((acc - oacc).abs() < 1e-12 && (mf1 - omf1).abs() < 1e-12);
    }

    #[test]
    fn identity_and_constant_predictor() {
        assert_eq!(accuracy_macro_f1(&[P, N, N], &[P, N, N]).unwrap(), (100.0, 100.0));
        let (acc, mf1) = accuracy_macro_f1(&[P, P, N, N], &[P, P, P, P]).unwrap();
        assert_eq!(crate::fmt2(acc), "50.00");
        assert_eq!(crate::fmt2(mf1), "33.33");
    }

    #[test]
    fn absent_class_contributes_zero() {
        // Only positives in gold and pred: negative F1 is 0 by convention.
        assert_eq!(accuracy_macro_f1(&[P, P], &[P, P]).unwrap(), (100.0, 50.0));
    }

    #[test]
    fn abstentions_count_against_all_samples_convention() {
        let gold = [P, P, N, N];
        let pred = [Some(P), None, Some(N), Some(N)];
        let (acc, _) = accuracy_macro_f1_with_abstentions(&gold, &pred).unwrap();
        assert_eq!(acc, 75.0);
    }

    #[test]
    fn metric_errors() {
        assert_eq!(accuracy_macro_f1(&[], &[]), Err(MetricsError::Empty));
        assert!(matches!(
            accuracy_macro_f1(&[P], &[P, N]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert_eq!(weighted_mf1(&[]), Err(MetricsError::Empty));
        assert_eq!(weighted_mf1(&[(50.0, 0)]), Err(MetricsError::ZeroSize));
    }

    #[test]
    fn weighted_collapses_for_single_dataset() {
        assert_eq!(weighted_mf1(&[(61.25, 37)]).unwrap(), 61.25);
    }

    #[test]
    fn stability_requires_every_variant_once() {
        let mut cells: Vec<(PromptSpec, f64)> = PromptSpec::ALL.iter().map(|s| (*s, 42.0)).collect();
        let row = stability("m", &cells).unwrap();
        assert_eq!((row.mean, row.std_dev), (42.0, 0.0));
        cells.pop();
        assert!(matches!(stability("m", &cells), Err(MetricsError::MissingVariant(_))));
        cells.push(cells[0]);
        assert!(matches!(stability("m", &cells), Err(MetricsError::DuplicateVariant(_))));
    }

    #[test]
    fn population_std_direct_formula() {
        let values = [0.0, 100.0, 0.0, 100.0, 0.0, 100.0, 0.0, 100.0];
        let cells: Vec<(PromptSpec, f64)> = PromptSpec::ALL.iter().copied().zip(values).collect();
        let row = stability("m", &cells).unwrap();
        assert_eq!(row.mean, 50.0);
        // Every value sits 50 from the mean, so the population std is 50.
        assert_eq!(row.std_dev, 50.0);
    }

    #[test]
    fn alpha_perfect_agreement_is_one() {
        let table = vec![
            vec![Some("a"), Some("a"), Some("a")],
            vec![Some("b"), Some("b"), Some("b")],
            vec![Some("a"), Some("a"), Some("a")],
            vec![Some("c"), Some("c"), None],
        ];
        let r = krippendorff_alpha(&table).unwrap();
        assert_eq!(r.alpha, 1.0);
        assert_eq!((r.n_items, r.n_annotators), (4, 3));
    }

    #[test]
    fn alpha_balanced_disagreement() {
        // Two coders, items (a,a),(b,b),(a,b),(b,a): o_aa = 2, o_bb = 2,
        // o_ab = o_ba = 2, n = 8, n_a = n_b = 4.
        // alpha = 1 - (n-1) * 4 / (2 * 4 * 4) = 1 - 7 * 4 / 32 = 0.125.
        let table = vec![
            vec![Some('a'), Some('a')],
            vec![Some('b'), Some('b')],
            vec![Some('a'), Some('b')],
            vec![Some('b'), Some('a')],
        ];
        assert!((krippendorff_alpha(&table).unwrap().alpha - 0.125).abs() < 1e-12);
    }

    #[test]
    fn alpha_errors() {
        assert_eq!(
            krippendorff_alpha(&[vec![Some(1)]]),
            Err(MetricsError::TooFewAnnotators(1))
        );
        assert_eq!(
            krippendorff_alpha(&[vec![Some(1), None], vec![None, Some(2)]]),
            Err(MetricsError::NoPairableCodings)
        );
    }
}
