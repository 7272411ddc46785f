//! Search and view filters.
//!
//! Clauses combine with AND. Record clauses (`keyword`, `regex`) look at the
//! record text; annotation clauses (`label_eq`, `metadata_cmp`, `verified`,
//! `agent_id`, `job_id`) look at one LLM annotation of the record.
//!
//! * Keyword matching is a case-insensitive substring test.
//! * Regex matching is case-sensitive and unanchored.
//! * In annotation views every row is one annotation and all clauses apply to
//!   that row. In record search a record matches when its record clauses hold
//!   and, if any annotation clause is set, at least one of its annotations
//!   satisfies all of them at once.
//! * Sorting on a metadata name puts rows lacking the value last in either
//!   direction; ties fall back to ascending record id (then job id).

use std::cmp::Ordering;
use std::fmt;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentId, Annotation, JobId, Record, RecordId, VerificationStatus};

/// Sort key naming the creation timestamp instead of a metadata value.
pub const CREATED_AT: &str = "created_at";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEq {
    pub schema_name: String,
    pub value: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "<", alias = "lt")]
    Lt,
    #[serde(rename = "<=", alias = "le", alias = "≤")]
    Le,
    #[serde(rename = ">", alias = "gt")]
    Gt,
    #[serde(rename = ">=", alias = "ge", alias = "≥")]
    Ge,
    #[serde(rename = "=", alias = "eq")]
    Eq,
}

impl CmpOp {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            CmpOp::Lt => value < threshold,
            CmpOp::Le => value <= threshold,
            CmpOp::Gt => value > threshold,
            CmpOp::Ge => value >= threshold,
            CmpOp::Eq => value == threshold,
        }
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "=",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataCmp {
    pub name: String,
    pub op: CmpOp,
    pub threshold: f64,
}

/// Review state of an annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReviewStatus {
    Unverified,
    Confirmed,
    Corrected,
}

impl From<Option<VerificationStatus>> for ReviewStatus {
    fn from(status: Option<VerificationStatus>) -> Self {
        match status {
            None => ReviewStatus::Unverified,
            Some(VerificationStatus::Confirmed) => ReviewStatus::Confirmed,
            Some(VerificationStatus::Corrected) => ReviewStatus::Corrected,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerifiedFilter {
    Any,
    Unverified,
    Confirmed,
    Corrected,
}

impl VerifiedFilter {
    fn admits(self, status: ReviewStatus) -> bool {
        match self {
            VerifiedFilter::Any => true,
            VerifiedFilter::Unverified => status == ReviewStatus::Unverified,
            VerifiedFilter::Confirmed => status == ReviewStatus::Confirmed,
            VerifiedFilter::Corrected => status == ReviewStatus::Corrected,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortDirection {
    #[default]
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortSpec {
    /// A metadata name, or `created_at`.
    pub key: String,
    #[serde(default)]
    pub direction: SortDirection,
}

/// Conjunctive filter over records and their annotations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterExpr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_eq: Option<LabelEq>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata_cmp: Option<MetadataCmp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified: Option<VerifiedFilter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<AgentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<JobId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sort: Option<SortSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("filter needs at least one clause or a limit")]
    Empty,
    #[error("limit must be a positive integer")]
    ZeroLimit,
    #[error("metadata threshold must be a finite number")]
    InvalidThreshold,
    #[error("invalid regex {pattern:?}{}: {message}", position.map(|p| format!(" at offset {p}")).unwrap_or_default())]
    InvalidRegex {
        pattern: String,
        position: Option<usize>,
        message: String,
    },
}

impl FilterExpr {
    pub fn limit(n: usize) -> Self {
        FilterExpr {
            limit: Some(n),
            ..Default::default()
        }
    }

    pub fn keyword(k: impl Into<String>) -> Self {
        FilterExpr {
            keyword: Some(k.into()),
            ..Default::default()
        }
    }

    pub fn has_clause(&self) -> bool {
        self.keyword.is_some() || self.regex.is_some() || self.has_annotation_clause() || self.sort.is_some()
    }

    /// True when some clause constrains annotations.
    pub fn has_annotation_clause(&self) -> bool {
        self.label_eq.is_some()
            || self.metadata_cmp.is_some()
            || self.verified.is_some_and(|v| v != VerifiedFilter::Any)
            || self.agent_id.is_some()
            || self.job_id.is_some()
    }

    /// Validates the filter and compiles its regex.
    pub fn compile(&self) -> Result<CompiledFilter<'_>, FilterError> {
        if self.limit == Some(0) {
            return Err(FilterError::ZeroLimit);
        }
        if self.metadata_cmp.as_ref().is_some_and(|m| !m.threshold.is_finite()) {
            return Err(FilterError::InvalidThreshold);
        }
        let regex = self.regex.as_deref().map(compile_regex).transpose()?;
        Ok(CompiledFilter {
            expr: self,
            keyword: self.keyword.as_ref().map(|k| k.to_lowercase()),
            regex,
        })
    }

    /// Like [`compile`](Self::compile), additionally requiring a clause or a
    /// limit, as subset searches do.
    pub fn compile_nonempty(&self) -> Result<CompiledFilter<'_>, FilterError> {
        if !self.has_clause() && self.limit.is_none() {
            return Err(FilterError::Empty);
        }
        self.compile()
    }
}

fn compile_regex(pattern: &str) -> Result<Regex, FilterError> {
    if let Err(e) = regex_syntax::Parser::new().parse(pattern) {
        let (position, message) = match &e {
            regex_syntax::Error::Parse(e) => (Some(e.span().start.offset), e.kind().to_string()),
            regex_syntax::Error::Translate(e) => (Some(e.span().start.offset), e.kind().to_string()),
            other => (None, other.to_string()),
        };
        return Err(FilterError::InvalidRegex {
            pattern: pattern.to_string(),
            position,
            message,
        });
    }
    Regex::new(pattern).map_err(|e| FilterError::InvalidRegex {
        pattern: pattern.to_string(),
        position: None,
        message: e.to_string(),
    })
}

/// A validated filter ready for evaluation.
#[derive(Debug, Clone)]
pub struct CompiledFilter<'a> {
    expr: &'a FilterExpr,
    keyword: Option<String>,
    regex: Option<Regex>,
}

/// One annotation joined with its record and review status.
#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    pub record: &'a Record,
    pub annotation: &'a Annotation,
    pub status: ReviewStatus,
}

impl CompiledFilter<'_> {
    pub fn expr(&self) -> &FilterExpr {
        self.expr
    }

    pub fn matches_record(&self, record: &Record) -> bool {
        if let Some(k) = &self.keyword {
            if !record.content.to_lowercase().contains(k.as_str()) {
                return false;
            }
        }
        if let Some(re) = &self.regex {
            if !re.is_match(&record.content) {
                return false;
            }
        }
        true
    }

    pub fn matches_annotation(&self, annotation: &Annotation, status: ReviewStatus) -> bool {
        let e = self.expr;
        if let Some(l) = &e.label_eq {
            if annotation.label.schema_name != l.schema_name || annotation.label.value != l.value {
                return false;
            }
        }
        if let Some(m) = &e.metadata_cmp {
            match annotation.metadata_value(&m.name) {
                Some(v) if m.op.holds(v, m.threshold) => {}
                _ => return false,
            }
        }
        if let Some(v) = e.verified {
            if !v.admits(status) {
                return false;
            }
        }
        if e.agent_id.is_some_and(|a| a != annotation.agent_id) {
            return false;
        }
        if e.job_id.is_some_and(|j| j != annotation.job_id) {
            return false;
        }
        true
    }

    pub fn matches_row(&self, row: &RowView<'_>) -> bool {
        self.matches_record(row.record) && self.matches_annotation(row.annotation, row.status)
    }

    fn sort_value_of(&self, annotation: &Annotation) -> Option<SortValue> {
        let sort = self.expr.sort.as_ref()?;
        if sort.key == CREATED_AT {
            Some(SortValue::Time(annotation.created_at))
        } else {
            annotation.metadata_value(&sort.key).map(SortValue::Number)
        }
    }

    /// Sorts annotation rows in place and applies the limit.
    pub fn order_rows(&self, rows: &mut Vec<RowView<'_>>) {
        let direction = self.direction();
        let tie = |a: &RowView<'_>, b: &RowView<'_>| {
            (a.record.id, a.annotation.job_id).cmp(&(b.record.id, b.annotation.job_id))
        };
        if self.expr.sort.is_some() {
            rows.sort_by(|a, b| {
                compare_keys(
                    self.sort_value_of(a.annotation),
                    self.sort_value_of(b.annotation),
                    direction,
                )
                .then_with(|| tie(a, b))
            });
        } else {
            rows.sort_by(tie);
        }
        if let Some(limit) = self.expr.limit {
            rows.truncate(limit);
        }
    }

    /// Sort key of a record in record search: the extreme value among its
    /// matching annotations in the sort direction (minimum for ascending,
    /// maximum for descending), or its import time for `created_at`.
    pub fn record_sort_value<'b>(
        &self,
        imported_at: DateTime<Utc>,
        matching: impl IntoIterator<Item = &'b Annotation>,
    ) -> Option<SortValue> {
        let sort = self.expr.sort.as_ref()?;
        if sort.key == CREATED_AT {
            return Some(SortValue::Time(imported_at));
        }
        let values = matching.into_iter().filter_map(|a| a.metadata_value(&sort.key));
        let pick = match sort.direction {
            SortDirection::Asc => values.reduce(f64::min),
            SortDirection::Desc => values.reduce(f64::max),
        };
        pick.map(SortValue::Number)
    }

    /// Sorts `(record id, key)` pairs and applies the limit.
    pub fn order_records(&self, keyed: &mut Vec<(RecordId, Option<SortValue>)>) {
        let direction = self.direction();
        if self.expr.sort.is_some() {
            keyed.sort_by(|a, b| compare_keys(a.1, b.1, direction).then(a.0.cmp(&b.0)));
        } else {
            keyed.sort_by_key(|k| k.0);
        }
        if let Some(limit) = self.expr.limit {
            keyed.truncate(limit);
        }
    }

    fn direction(&self) -> SortDirection {
        self.expr.sort.as_ref().map(|s| s.direction).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum SortValue {
    Number(f64),
    Time(DateTime<Utc>),
}

/// Present keys first in `direction`, missing keys last.
fn compare_keys(a: Option<SortValue>, b: Option<SortValue>, direction: SortDirection) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => {
            let ord = x.partial_cmp(&y).unwrap_or(Ordering::Equal);
            match direction {
                SortDirection::Asc => ord,
                SortDirection::Desc => ord.reverse(),
            }
        }
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}
