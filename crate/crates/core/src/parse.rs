//! Free-text generation to binary label, or an explicit ambiguity verdict.
//!
//! A label counts as the model's answer only when it opens the response or
//! opens a line, optionally after an echoed `Example output for ... meme :`
//! prefix. Labels that appear only inside prose are reported as
//! [`Ambiguity::NonLeadingLabel`]; hedges such as "not harmful, but it is
//! not harmless" therefore never become predictions.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_label, LabelSchema, Polarity};
use crate::prompt::OutputPattern;

/// Fraction of parseable responses below which a run is flagged.
pub const SUPPORT_THRESHOLD: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ambiguity {
    None,
    /// Both polarities were given as answers.
    BothLabels,
    /// Neither label word appears anywhere.
    NoLabel,
    /// Label words appear, but never in answer position.
    NonLeadingLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub label: Option<Polarity>,
    pub explanation: Option<String>,
    pub ambiguity: Ambiguity,
}

impl ParsedPrediction {
    pub fn labeled(label: Polarity, explanation: Option<String>) -> Self {
        ParsedPrediction {
            label: Some(label),
            explanation,
            ambiguity: Ambiguity::None,
        }
    }

    pub fn ambiguous(ambiguity: Ambiguity) -> Self {
        debug_assert_ne!(ambiguity, Ambiguity::None);
        ParsedPrediction {
            label: None,
            explanation: None,
            ambiguity,
        }
    }

    pub fn is_parsed(&self) -> bool {
        self.ambiguity == Ambiguity::None
    }
}

/// A normalized view of one line that remembers where each normalized
/// character came from in the original text.
struct NormLine {
    chars: Vec<char>,
    /// Byte offset in the original text just past the source of each char.
    ends: Vec<usize>,
}

impl NormLine {
    fn new(line: &str, base: usize) -> Self {
        let mut chars = Vec::with_capacity(line.len());
        let mut ends = Vec::with_capacity(line.len());
        let mut in_separator = false;
        for (offset, ch) in line.char_indices() {
            let end = base + offset + ch.len_utf8();
            if ch == '-' || ch == '_' || ch.is_whitespace() {
                if in_separator {
                    if let Some(last) = ends.last_mut() {
                        *last = end;
                    }
                } else {
                    chars.push(' ');
                    ends.push(end);
                    in_separator = true;
                }
                continue;
            }
            in_separator = false;
            for lower in ch.to_lowercase() {
                chars.push(lower);
                ends.push(end);
            }
        }
        NormLine { chars, ends }
    }

    fn starts_with_at(&self, at: usize, needle: &[char]) -> bool {
        self.chars.len() >= at + needle.len() && self.chars[at..at + needle.len()] == *needle
    }

    fn boundary_after(&self, at: usize) -> bool {
        self.chars.get(at).is_none_or(|c| !c.is_alphanumeric())
    }

    fn boundary_before(&self, at: usize) -> bool {
        at == 0 || !self.chars[at - 1].is_alphanumeric()
    }

    fn skip_decoration(&self, mut at: usize) -> usize {
        while let Some(c) = self.chars.get(at) {
            if is_decoration(*c) {
                at += 1;
            } else {
                break;
            }
        }
        at
    }

    /// Skips an echoed `example output for <...> meme :` prefix if present.
    fn skip_echo(&self, at: usize) -> usize {
        const PREFIX: &str = "example output for ";
        let prefix: Vec<char> = PREFIX.chars().collect();
        if !self.starts_with_at(at, &prefix) {
            return at;
        }
        let meme: Vec<char> = "meme".chars().collect();
        let mut i = at + prefix.len();
        while i + meme.len() <= self.chars.len() {
            if self.starts_with_at(i, &meme) {
                let mut j = i + meme.len();
                while self.chars.get(j) == Some(&' ') {
                    j += 1;
                }
                if self.chars.get(j) == Some(&':') {
                    return self.skip_decoration(j + 1);
                }
            }
            i += 1;
        }
        at
    }

    fn contains_word(&self, needle: &[char]) -> bool {
        if needle.is_empty() || needle.len() > self.chars.len() {
            return false;
        }
        (0..=self.chars.len() - needle.len())
            .any(|i| self.starts_with_at(i, needle) && self.boundary_before(i) && self.boundary_after(i + needle.len()))
    }
}

fn is_decoration(c: char) -> bool {
    matches!(
        c,
        ' ' | '*' | '"' | '\'' | '`' | '(' | '[' | '>' | '#' | '.' | ':' | '“' | '”' | '‘' | '’'
    )
}

fn is_explanation_separator(c: char) -> bool {
    c.is_whitespace()
        || matches!(
            c,
            '-' | ':' | '–' | '—' | '*' | '"' | '\'' | '`' | ')' | ']' | '.' | ',' | '“' | '”' | '‘' | '’'
        )
}

/// Maps a generation onto a label or an ambiguity verdict. Total: every
/// string yields a verdict.
pub fn parse_label(text: &str, schema: &LabelSchema) -> ParsedPrediction {
    let mut labels: Vec<(Vec<char>, Polarity)> = [Polarity::Positive, Polarity::Negative]
        .into_iter()
        .map(|p| (normalize_label(schema.name(p)).chars().collect(), p))
        .collect();
    // Longest match first so "not hateful" shadows its embedded "hateful".
    labels.sort_by_key(|l| core::cmp::Reverse(l.0.len()));

    let mut answers: Vec<(Polarity, usize)> = Vec::new();
    let mut mentioned = false;
    let mut base = 0;
    for line in text.split('\n') {
        let norm = NormLine::new(line, base);
        base += line.len() + 1;

        let start = norm.skip_decoration(0);
        let start = norm.skip_echo(start);
        let answer = labels.iter().find(|(name, _)| {
            !name.is_empty() && norm.starts_with_at(start, name) && norm.boundary_after(start + name.len())
        });
        match answer {
            Some((name, polarity)) => answers.push((*polarity, norm.ends[start + name.len() - 1])),
            None => mentioned |= labels.iter().any(|(name, _)| norm.contains_word(name)),
        }
    }

    let Some(&(first, label_end)) = answers.first() else {
        return ParsedPrediction::ambiguous(if mentioned {
            Ambiguity::NonLeadingLabel
        } else {
            Ambiguity::NoLabel
        });
    };
    if answers.iter().any(|(p, _)| *p != first) {
        return ParsedPrediction::ambiguous(Ambiguity::BothLabels);
    }
    let explanation = text[label_end..]
        .trim_start_matches(is_explanation_separator)
        .trim_end();
    let explanation = (!explanation.is_empty()).then(|| explanation.to_string());
    ParsedPrediction::labeled(first, explanation)
}

/// [`parse_label`], keeping the explanation only for explanation prompts.
pub fn parse_response(text: &str, schema: &LabelSchema, output: OutputPattern) -> ParsedPrediction {
    let mut parsed = parse_label(text, schema);
    if output == OutputPattern::Vanilla {
        parsed.explanation = None;
    }
    parsed
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportStat {
    pub parsed_count: usize,
    pub total_count: usize,
    pub support_fraction: f64,
    pub below_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SupportError {
    #[error("cannot compute support over an empty run")]
    EmptyRun,
}

impl SupportStat {
    pub fn from_counts(parsed_count: usize, total_count: usize) -> Result<Self, SupportError> {
        if total_count == 0 {
            return Err(SupportError::EmptyRun);
        }
        Ok(SupportStat {
            parsed_count,
            total_count,
            support_fraction: parsed_count as f64 / total_count as f64,
            // "at least 90%" passes; compare in integers to keep 90/100 exact.
            below_threshold: parsed_count * 10 < total_count * 9,
        })
    }
}

pub fn support(predictions: &[ParsedPrediction]) -> Result<SupportStat, SupportError> {
    let parsed = predictions.iter().filter(|p| p.is_parsed()).count();
    SupportStat::from_counts(parsed, predictions.len())
}
