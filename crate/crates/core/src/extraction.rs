//! Turning free-text completions into schema-valid labels.
//!
//! Responses go through a fixed normalization pipeline, then are matched
//! against the normalized schema options. Formatting noise (case, quotes,
//! `Label:` prefixes, trailing punctuation) is tolerated; anything that does
//! not resolve to exactly one option is reported as invalid and never turns
//! into a label. There is deliberately no edit-distance matching: a near miss
//! such as `notentailed` stays invalid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ProviderResponse;
use crate::model::{Label, LabelSchema};

const QUOTES: &[char] = &[
    '"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}', '\u{ab}', '\u{bb}',
];
const PREFIXES: &[&str] = &["label:", "answer:", "output:"];
const TRAILING_PUNCTUATION: &[char] = &['.', '!', ';'];

/// Canonical form used for comparing responses with options.
///
/// Takes the first non-empty line, then repeatedly strips surrounding
/// whitespace, quote characters, `label:`/`answer:`/`output:` prefixes
/// (any case) and trailing `.`, `!`, `;` until nothing changes. Finally
/// internal whitespace runs collapse to one space and the text is lowercased.
/// The function is idempotent.
pub fn normalize_text(s: &str) -> String {
    let mut text = s.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    loop {
        let before = text;
        text = text.trim().trim_matches(QUOTES);
        text = strip_known_prefix(text);
        text = text.trim_end_matches(TRAILING_PUNCTUATION);
        if text == before {
            break;
        }
    }
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn strip_known_prefix(text: &str) -> &str {
    for prefix in PREFIXES {
        if let Some(head) = text.get(..prefix.len()) {
            if head.eq_ignore_ascii_case(prefix) {
                return &text[prefix.len()..];
            }
        }
    }
    text
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    /// The response was exactly an option.
    Exact,
    /// The response equals an option after normalization.
    Normalized,
    /// Exactly one option occurs inside the response.
    Contained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    NoMatch,
    Ambiguous,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExtractionOutcome {
    Valid { label: Label, match_kind: MatchKind },
    Invalid { reason: InvalidReason },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub outcome: ExtractionOutcome,
    pub normalized_text: String,
}

impl ExtractionResult {
    pub fn label(&self) -> Option<&Label> {
        match &self.outcome {
            ExtractionOutcome::Valid { label, .. } => Some(label),
            ExtractionOutcome::Invalid { .. } => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.label().is_some()
    }

    fn invalid(reason: InvalidReason, normalized_text: String) -> Self {
        ExtractionResult {
            outcome: ExtractionOutcome::Invalid { reason },
            normalized_text,
        }
    }
}

/// Resolves already-normalized text to at most one schema option.
///
/// Whole-text equality wins first. Otherwise every occurrence of every
/// normalized option is collected; an occurrence is discarded when a strictly
/// longer occurrence overlaps it, so `not entailment` hides the nested
/// `entailment`. One surviving option is a `contained` match, several are
/// ambiguous.
pub fn match_label(normalized: &str, schema: &LabelSchema) -> ExtractionResult {
    if normalized.is_empty() {
        return ExtractionResult::invalid(InvalidReason::Empty, String::new());
    }
    let options: Vec<String> = schema.options.iter().map(|o| normalize_text(o)).collect();

    if let Some(option) = schema.options.iter().find(|o| o.as_str() == normalized) {
        return valid(schema, option, MatchKind::Exact, normalized);
    }
    if let Some(i) = options.iter().position(|o| o == normalized) {
        return valid(schema, &schema.options[i], MatchKind::Normalized, normalized);
    }

    // (start, end, option index)
    let spans: Vec<(usize, usize, usize)> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.is_empty())
        .flat_map(|(i, o)| {
            normalized
                .match_indices(o.as_str())
                .map(move |(start, m)| (start, start + m.len(), i))
        })
        .collect();
    let overlaps = |a: &(usize, usize, usize), b: &(usize, usize, usize)| a.0 < b.1 && b.0 < a.1;
    let mut survivors: Vec<usize> = spans
        .iter()
        .filter(|s| {
            !spans
                .iter()
                .any(|other| other.1 - other.0 > s.1 - s.0 && overlaps(s, other))
        })
        .map(|s| s.2)
        .collect();
    survivors.sort_unstable();
    survivors.dedup();

    match survivors.as_slice() {
        [] => ExtractionResult::invalid(InvalidReason::NoMatch, normalized.to_string()),
        [i] => valid(schema, &schema.options[*i], MatchKind::Contained, normalized),
        _ => ExtractionResult::invalid(InvalidReason::Ambiguous, normalized.to_string()),
    }
}

fn valid(schema: &LabelSchema, option: &str, match_kind: MatchKind, normalized: &str) -> ExtractionResult {
    ExtractionResult {
        outcome: ExtractionOutcome::Valid {
            label: schema.label(option),
            match_kind,
        },
        normalized_text: normalized.to_string(),
    }
}

/// Normalizes and matches raw completion text.
pub fn extract_text(text: &str, schema: &LabelSchema) -> ExtractionResult {
    let normalized = normalize_text(text);
    let mut result = match_label(&normalized, schema);
    if let ExtractionOutcome::Valid { label, match_kind } = &mut result.outcome {
        if *match_kind == MatchKind::Exact && text.trim() != label.value {
            *match_kind = MatchKind::Normalized;
        }
    }
    result
}

pub fn extract_label(response: &ProviderResponse, schema: &LabelSchema) -> ExtractionResult {
    extract_text(&response.text, schema)
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ConfidenceError {
    #[error("log-probability {0} is positive")]
    Positive(f64),
    #[error("log-probability {0} is not finite")]
    NonFinite(f64),
}

/// Geometric-mean token probability: `exp(mean(logprobs))`.
///
/// Returns `Ok(None)` when no log-probabilities were supplied. The result
/// lies in `(0, 1]`; an underflow to zero is clamped to the smallest
/// positive double.
pub fn compute_confidence(logprobs: Option<&[f64]>) -> Result<Option<f64>, ConfidenceError> {
    let Some(logprobs) = logprobs else {
        return Ok(None);
    };
    if logprobs.is_empty() {
        return Ok(None);
    }
    for &lp in logprobs {
        if !lp.is_finite() {
            return Err(ConfidenceError::NonFinite(lp));
        }
        if lp > 0.0 {
            return Err(ConfidenceError::Positive(lp));
        }
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok(Some(mean.exp().clamp(f64::MIN_POSITIVE, 1.0)))
}

/// Confidence of a provider response over its completion tokens.
pub fn response_confidence(response: &ProviderResponse) -> Result<Option<f64>, ConfidenceError> {
    let logprobs: Option<Vec<f64>> = response
        .token_logprobs
        .as_ref()
        .map(|tokens| tokens.iter().map(|t| t.logprob).collect());
    compute_confidence(logprobs.as_deref())
}

/// One row of the invalid-response frequency table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidCount {
    pub text: String,
    pub count: usize,
}

/// Counts invalid outcomes by normalized text, most frequent first, ties in
/// lexicographic order.
pub fn tally_invalid<'a>(results: impl IntoIterator<Item = &'a ExtractionResult>) -> Vec<InvalidCount> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in results {
        if !r.is_valid() {
            *counts.entry(r.normalized_text.as_str()).or_default() += 1;
        }
    }
    let mut table: Vec<InvalidCount> = counts
        .into_iter()
        .map(|(text, count)| InvalidCount {
            text: text.to_string(),
            count,
        })
        .collect();
    // BTreeMap iteration is already lexicographic; a stable sort keeps it for ties.
    table.sort_by_key(|c| std::cmp::Reverse(c.count));
    table
}
