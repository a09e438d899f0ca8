//! Error typology: two-way clustering of misclassified memes per error
//! direction, class-based TF-IDF topic terms, and per-cluster case shares.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::Case;
use crate::corpus::Polarity;
use crate::stoplist::is_stop_word;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_TOP_TERMS: usize = 10;
pub const DEFAULT_REPRESENTATIVES: usize = 3;
pub const MAX_LLOYD_ROUNDS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TypologyError {
    #[error("need at least 2 vectors to bisect, got {0}")]
    TooFew(usize),
    #[error("vector {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("vector has zero or non-finite norm")]
    ZeroNorm,
    #[error("sample {0} has no audit outcome")]
    MissingOutcome(String),
    #[error("sample {sample_id} is {case}, which does not belong to this error group")]
    WrongDirection { sample_id: String, case: Case },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDirection {
    MisclassifiedAsPositive,
    MisclassifiedAsNegative,
}

impl ErrorDirection {
    pub const ALL: [ErrorDirection; 2] = [
        ErrorDirection::MisclassifiedAsPositive,
        ErrorDirection::MisclassifiedAsNegative,
    ];

    /// Direction of an error given the model's (wrong) prediction.
    pub fn of_prediction(pred: Polarity) -> Self {
        match pred {
            Polarity::Positive => ErrorDirection::MisclassifiedAsPositive,
            Polarity::Negative => ErrorDirection::MisclassifiedAsNegative,
        }
    }

    pub fn admits(self, case: Case) -> bool {
        Self::of_prediction(case.original_pred()) == self
    }

    pub fn id(self) -> &'static str {
        match self {
            ErrorDirection::MisclassifiedAsPositive => "misclassified_as_positive",
            ErrorDirection::MisclassifiedAsNegative => "misclassified_as_negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Image and OCR text vectors averaged.
    Multimodal,
    /// Text alone (OCR or a model explanation).
    TextOnly,
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, TypologyError> {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if !(norm.is_finite() && norm > 0.0) {
        return Err(TypologyError::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// `normalize(normalize(image) + normalize(text))`, or the normalized image
/// vector alone when there is no text.
pub fn combine_embeddings(image: &[f64], text: Option<&[f64]>) -> Result<Vec<f64>, TypologyError> {
    let v = l2_normalize(image)?;
    let Some(text) = text else { return Ok(v) };
    if text.len() != v.len() {
        return Err(TypologyError::DimensionMismatch {
            index: 1,
            expected: v.len(),
            got: text.len(),
        });
    }
    let w = l2_normalize(text)?;
    let sum: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a + b).collect();
    // Antipodal inputs cancel; fall back to the image vector.
    l2_normalize(&sum).or(Ok(v))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Two-way partition of a set of vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bisection {
    /// Cluster (0 or 1) of each input vector.
    pub assignment: Vec<usize>,
    /// All vectors coincide; everything is in cluster 0.
    pub degenerate: bool,
}

impl Bisection {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }

    pub fn centroid(&self, vectors: &[Vec<f64>], cluster: usize) -> Option<Vec<f64>> {
        let members = self.members(cluster);
        let first = vectors.first()?;
        if members.is_empty() {
            return None;
        }
        let mut c = vec![0.0; first.len()];
        for &i in &members {
            for (acc, x) in c.iter_mut().zip(&vectors[i]) {
                *acc += x;
            }
        }
        c.iter_mut().for_each(|x| *x /= members.len() as f64);
        Some(c)
    }
}

/// Within-cluster sum of squared distances to cluster means.
pub fn within_ss(vectors: &[Vec<f64>], assignment: &[usize]) -> f64 {
    let b = Bisection {
        assignment: assignment.to_vec(),
        degenerate: false,
    };
    (0..2)
        .filter_map(|c| b.centroid(vectors, c).map(|mu| (c, mu)))
        .map(|(c, mu)| b.members(c).iter().map(|&i| dist2(&vectors[i], &mu)).sum::<f64>())
        .sum()
}

/// Seeded 2-means: farthest-point initialization from a random first
/// point, Lloyd rounds to a fixpoint (at most 100), then single-point moves
/// while any lowers the within-cluster sum of squares. Cluster 0 is the
/// larger; on equal sizes it is the one holding the lowest index.
pub fn bisect(vectors: &[Vec<f64>], seed: u64) -> Result<Bisection, TypologyError> {
    let n = vectors.len();
    if n < 2 {
        return Err(TypologyError::TooFew(n));
    }
    let dim = vectors[0].len();
    if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(TypologyError::DimensionMismatch {
            index,
            expected: dim,
            got: v.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let mut second = first;
    let mut far = 0.0;
    for (i, v) in vectors.iter().enumerate() {
        let d = dist2(v, &vectors[first]);
        if d > far {
            far = d;
            second = i;
        }
    }
    if far == 0.0 {
        return Ok(Bisection {
            assignment: vec![0; n],
            degenerate: true,
        });
    }

    let mut centers = [vectors[first].clone(), vectors[second].clone()];
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ROUNDS {
        let mut changed = false;
        for (i, v) in vectors.iter().enumerate() {
            let c = usize::from(dist2(v, &centers[1]) < dist2(v, &centers[0]));
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = vectors
                .iter()
                .zip(&assignment)
                .filter(|(_, a)| **a == c)
                .map(|(v, _)| v)
                .collect();
            if members.is_empty() {
                continue;
            }
            center.iter_mut().for_each(|x| *x = 0.0);
            for m in &members {
                for (acc, x) in center.iter_mut().zip(m.iter()) {
                    *acc += x;
                }
            }
            center.iter_mut().for_each(|x| *x /= members.len() as f64);
        }
    }

    hartigan_refine(vectors, &mut assignment);

    let size0 = assignment.iter().filter(|&&a| a == 0).count();
    let size1 = n - size0;
    let swap = size1 > size0 || (size1 == size0 && assignment[0] == 1);
    if swap {
        assignment.iter_mut().for_each(|a| *a = 1 - *a);
    }
    Ok(Bisection {
        assignment,
        degenerate: false,
    })
}

/// Moves single points between clusters while a move strictly lowers the
/// within-cluster sum of squares. Never empties a cluster.
fn hartigan_refine(vectors: &[Vec<f64>], assignment: &mut [usize]) {
    let dim = vectors[0].len();
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    let mut sizes = [0usize; 2];
    for (v, &a) in vectors.iter().zip(assignment.iter()) {
        sizes[a] += 1;
        for (acc, x) in sums[a].iter_mut().zip(v) {
            *acc += x;
        }
    }
    let mean = |sum: &[f64], size: usize| -> Vec<f64> { sum.iter().map(|x| x / size as f64).collect() };
    // Bounded so float noise can never cycle forever.
    for _ in 0..vectors.len() * 4 + 16 {
        let mut moved = false;
        for (i, v) in vectors.iter().enumerate() {
            let a = assignment[i];
            let b = 1 - a;
            if sizes[a] < 2 || sizes[b] == 0 {
                continue;
            }
            let (na, nb) = (sizes[a] as f64, sizes[b] as f64);
            let gain_out = na / (na - 1.0) * dist2(v, &mean(&sums[a], sizes[a]));
            let cost_in = nb / (nb + 1.0) * dist2(v, &mean(&sums[b], sizes[b]));
            if cost_in < gain_out - 1e-12 * gain_out.max(1.0) {
                assignment[i] = b;
                sizes[a] -= 1;
                sizes[b] += 1;
                for (k, x) in v.iter().enumerate() {
                    sums[a][k] -= x;
                    sums[b][k] += x;
                }
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// Lowercased alphanumeric words with stop words removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .filter(|w| !is_stop_word(w))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermScore {
    pub term: String,
    pub score: f64,
}

/// Top-`k` class-based TF-IDF terms per cluster.
///
/// `score(t, c) = tf(t, c) * ln(1 + A / f(t))` with `A` the mean token count
/// per cluster and `f(t)` the total count of `t`. Ties break by term.
/// Returns empty lists when no cluster has any token.
pub fn topic_terms(clusters: &[Vec<&str>], k: usize) -> Vec<Vec<TermScore>> {
    let counts: Vec<BTreeMap<String, usize>> = clusters
        .iter()
        .map(|texts| {
            let mut m = BTreeMap::new();
            for t in texts.iter().flat_map(|t| tokenize(t)) {
                *m.entry(t).or_insert(0) += 1;
            }
            m
        })
        .collect();
    let mut total: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &counts {
        for (t, c) in m {
            *total.entry(t.as_str()).or_insert(0) += c;
        }
    }
    let tokens: usize = total.values().sum();
    if tokens == 0 || clusters.is_empty() {
        return vec![Vec::new(); clusters.len()];
    }
    let avg = tokens as f64 / clusters.len() as f64;
    counts
        .iter()
        .map(|m| {
            let mut scored: Vec<TermScore> = m
                .iter()
                .map(|(t, &tf)| TermScore {
                    term: t.clone(),
                    score: tf as f64 * libm::log(1.0 + avg / total[t.as_str()] as f64),
                })
                .collect();
            scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.term.cmp(&b.term)));
            scored.truncate(k);
            scored
        })
        .collect()
}

/// Percentage of cluster members per case. All zeros for an empty cluster.
pub fn case_distribution(members: &[&str], outcomes: &BTreeMap<String, Case>) -> Result<[f64; 4], TypologyError> {
    let mut counts = [0usize; 4];
    for &m in members {
        let case = outcomes
            .get(m)
            .ok_or_else(|| TypologyError::MissingOutcome(m.to_string()))?;
        counts[case.index()] += 1;
    }
    if members.is_empty() {
        return Ok([0.0; 4]);
    }
    Ok(counts.map(|c| c as f64 * 100.0 / members.len() as f64))
}

/// One misclassified meme entering the typology.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember {
    pub sample_id: String,
    pub case: Case,
    /// Unit-norm embedding.
    pub vector: Vec<f64>,
    /// Text fed to topic extraction.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub members: Vec<String>,
    pub terms: Vec<TermScore>,
    pub case_distribution: [f64; 4],
    /// Members nearest the centroid.
    pub representatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub direction: ErrorDirection,
    pub mode: EmbedMode,
    pub clusters: Vec<ClusterReport>,
    /// Fewer than two members, or all embeddings identical.
    pub degenerate: bool,
    /// No member contributed any topic token.
    pub terms_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypologyReport {
    pub dataset_id: String,
    pub model_id: String,
    pub seed: u64,
    pub groups: Vec<GroupReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypologyParams {
    pub seed: u64,
    pub top_terms: usize,
    pub representatives: usize,
}

impl Default for TypologyParams {
    fn default() -> Self {
        TypologyParams {
            seed: DEFAULT_SEED,
            top_terms: DEFAULT_TOP_TERMS,
            representatives: DEFAULT_REPRESENTATIVES,
        }
    }
}

/// Clusters one error group and assembles its two cluster panels.
pub fn build_group(
    direction: ErrorDirection,
    mode: EmbedMode,
    members: &[GroupMember],
    params: &TypologyParams,
) -> Result<GroupReport, TypologyError> {
    if let Some(m) = members.iter().find(|m| !direction.admits(m.case)) {
        return Err(TypologyError::WrongDirection {
            sample_id: m.sample_id.clone(),
            case: m.case,
        });
    }
    let vectors: Vec<Vec<f64>> = members.iter().map(|m| m.vector.clone()).collect();
    let bisection = if members.len() >= 2 {
        bisect(&vectors, params.seed)?
    } else {
        Bisection {
            assignment: vec![0; members.len()],
            degenerate: true,
        }
    };
    let outcomes: BTreeMap<String, Case> = members.iter().map(|m| (m.sample_id.clone(), m.case)).collect();
    let texts: Vec<Vec<&str>> = (0..2)
        .map(|c| bisection.members(c).iter().map(|&i| members[i].text.as_str()).collect())
        .collect();
    let terms = topic_terms(&texts, params.top_terms);
    let terms_empty = terms.iter().all(|t| t.is_empty());

    let mut clusters = Vec::with_capacity(2);
    for (c, terms) in terms.into_iter().enumerate() {
        let idx = bisection.members(c);
        let ids: Vec<&str> = idx.iter().map(|&i| members[i].sample_id.as_str()).collect();
        let mut by_distance: Vec<(f64, usize)> = match bisection.centroid(&vectors, c) {
            Some(mu) => idx.iter().map(|&i| (dist2(&vectors[i], &mu), i)).collect(),
            None => Vec::new(),
        };
        by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        clusters.push(ClusterReport {
            members: ids.iter().map(|s| s.to_string()).collect(),
            terms,
            case_distribution: case_distribution(&ids, &outcomes)?,
            representatives: by_distance
                .iter()
                .take(params.representatives)
                .map(|&(_, i)| members[i].sample_id.clone())
                .collect(),
        });
    }
    Ok(GroupReport {
        direction,
        mode,
        clusters,
        degenerate: bisection.degenerate,
        terms_empty,
    })
}
