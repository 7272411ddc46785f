//! Domain types shared by every layer of the annotation service.
//!
//! Everything here is an immutable value. Identifiers are assigned by the
//! [`Store`](crate::store::Store); timestamps are recorded by the store at
//! write time, always in UTC.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extraction::normalize_text;
use crate::prompt::TemplateId;
use crate::store::FilterExpr;

/// Metadata name reserved for the label confidence estimate.
pub const CONFIDENCE_KEY: &str = "conf";

macro_rules! numeric_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl std::str::FromStr for $name {
            type Err = std::num::ParseIntError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.parse().map($name)
            }
        }
    };
}

numeric_id!(
    /// Identifier of an imported [`Record`].
    RecordId
);
numeric_id!(
    /// Identifier of a registered [`Agent`].
    AgentId
);
numeric_id!(
    /// Identifier of an annotation job.
    JobId
);
numeric_id!(
    /// Identifier of a persisted [`Subset`].
    SubsetId
);

/// A unit of data to annotate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: RecordId,
    pub content: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// Granularity of a label schema. Only whole-record labels are supported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaLevel {
    #[default]
    Record,
}

/// A closed, versioned set of label options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub name: String,
    pub options: Vec<String>,
    #[serde(default)]
    pub level: SchemaLevel,
    #[serde(default = "first_version")]
    pub version: u32,
}

fn first_version() -> u32 {
    1
}

impl LabelSchema {
    pub fn new<S: Into<String>>(name: impl Into<String>, options: impl IntoIterator<Item = S>) -> Self {
        LabelSchema {
            name: name.into(),
            options: options.into_iter().map(Into::into).collect(),
            level: SchemaLevel::Record,
            version: 1,
        }
    }

    pub fn contains(&self, value: &str) -> bool {
        self.options.iter().any(|o| o == value)
    }

    /// Builds a label for `value` tagged with this schema's name and version.
    /// The value is not checked; see [`validate_label`].
    pub fn label(&self, value: impl Into<String>) -> Label {
        Label {
            schema_name: self.name.clone(),
            schema_version: self.version,
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaViolation {
    #[error("schema name must be a non-empty identifier without whitespace")]
    InvalidName,
    #[error("fewer than 2 options")]
    TooFewOptions,
    #[error("option {index} is empty")]
    EmptyOption { index: usize },
    #[error("duplicate after normalization: {first:?} and {second:?}")]
    DuplicateAfterNormalization { first: String, second: String },
}

/// Returns every invariant `schema` violates. An empty list means valid.
pub fn validate_schema(schema: &LabelSchema) -> Vec<SchemaViolation> {
    let mut violations = Vec::new();
    if schema.name.is_empty() || schema.name.chars().any(char::is_whitespace) {
        violations.push(SchemaViolation::InvalidName);
    }
    if schema.options.len() < 2 {
        violations.push(SchemaViolation::TooFewOptions);
    }
    let mut seen: Vec<(String, &str)> = Vec::with_capacity(schema.options.len());
    for (index, option) in schema.options.iter().enumerate() {
        let normalized = normalize_text(option);
        if normalized.is_empty() {
            violations.push(SchemaViolation::EmptyOption { index });
            continue;
        }
        if let Some((_, first)) = seen.iter().find(|(n, _)| *n == normalized) {
            violations.push(SchemaViolation::DuplicateAfterNormalization {
                first: (*first).to_string(),
                second: option.clone(),
            });
        } else {
            seen.push((normalized, option));
        }
    }
    violations
}

/// A label value bound to a specific schema version.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub schema_name: String,
    pub schema_version: u32,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("label belongs to schema {found:?}, expected {expected:?}")]
    SchemaMismatch { expected: String, found: String },
    #[error("stale label: schema version {label_version} does not match {schema_version}")]
    StaleVersion { label_version: u32, schema_version: u32 },
    #[error("{value:?} is not an option of the schema")]
    NotAnOption { value: String },
}

/// Checks that `label.value` is byte-equal to one of `schema.options`.
pub fn validate_label(label: &Label, schema: &LabelSchema) -> Result<(), LabelError> {
    if label.schema_name != schema.name {
        return Err(LabelError::SchemaMismatch {
            expected: schema.name.clone(),
            found: label.schema_name.clone(),
        });
    }
    if label.schema_version != schema.version {
        return Err(LabelError::StaleVersion {
            label_version: label.schema_version,
            schema_version: schema.version,
        });
    }
    if !schema.contains(&label.value) {
        return Err(LabelError::NotAnOption {
            value: label.value.clone(),
        });
    }
    Ok(())
}

/// A scalar model parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Bool(b) => write!(f, "{b}"),
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Float(x) => write!(f, "{x}"),
            ParamValue::Text(s) => write!(f, "{s:?}"),
        }
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Float(v)
    }
}

impl From<i64> for ParamValue {
    fn from(v: i64) -> Self {
        ParamValue::Int(v)
    }
}

#[derive(Debug, Clone, Copy)]
enum ParamKind {
    Float { min: f64, max: f64 },
    Int { min: i64, max: i64 },
}

const COMPLETION_PARAMS: &[(&str, ParamKind)] = &[
    ("max_tokens", ParamKind::Int { min: 1, max: 32_768 }),
    ("seed", ParamKind::Int { min: 0, max: i64::MAX }),
    ("temperature", ParamKind::Float { min: 0.0, max: 2.0 }),
    ("top_p", ParamKind::Float { min: 0.0, max: 1.0 }),
];

/// Providers with a known parameter allowlist.
pub const KNOWN_PROVIDERS: &[&str] = &["openai", "mock"];

fn param_allowlist(provider: &str) -> Option<&'static [(&'static str, ParamKind)]> {
    match provider {
        "openai" | "mock" => Some(COMPLETION_PARAMS),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown provider {0:?}")]
    UnknownProvider(String),
    #[error("model name is empty")]
    EmptyModel,
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("{name} out of range: {value} not in [{min}, {max}]")]
    OutOfRange {
        name: String,
        value: String,
        min: String,
        max: String,
    },
    #[error("{name} must be {expected}, got {value}")]
    WrongType {
        name: String,
        expected: &'static str,
        value: String,
    },
}

impl ConfigError {
    /// Name of the offending parameter, when the error concerns one.
    pub fn param(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownParam(n) => Some(n),
            ConfigError::OutOfRange { name, .. } | ConfigError::WrongType { name, .. } => Some(name),
            _ => None,
        }
    }
}

fn default_provider() -> String {
    "openai".to_string()
}

/// Provider, model, and sampling parameters of an LLM annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_provider")]
    pub provider: String,
    pub model: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
}

impl ModelConfig {
    pub fn new(provider: impl Into<String>, model: impl Into<String>) -> Self {
        ModelConfig {
            provider: provider.into(),
            model: model.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, name: impl Into<String>, value: impl Into<ParamValue>) -> Self {
        self.params.insert(name.into(), value.into());
        self
    }

    pub fn max_tokens(&self) -> Option<u32> {
        match self.params.get("max_tokens") {
            Some(ParamValue::Int(n)) => u32::try_from(*n).ok(),
            _ => None,
        }
    }

    pub fn float_param(&self, name: &str) -> Option<f64> {
        match self.params.get(name)? {
            ParamValue::Float(x) => Some(*x),
            ParamValue::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn int_param(&self, name: &str) -> Option<i64> {
        match self.params.get(name)? {
            ParamValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    /// Validates against the provider's parameter allowlist and returns the
    /// canonical form: float parameters are stored as floats and integer
    /// parameters as integers, so `0` and `0.0` fingerprint identically.
    pub fn validate(&self) -> Result<ModelConfig, ConfigError> {
        let allowlist =
            param_allowlist(&self.provider).ok_or_else(|| ConfigError::UnknownProvider(self.provider.clone()))?;
        if self.model.trim().is_empty() {
            return Err(ConfigError::EmptyModel);
        }
        let mut params = BTreeMap::new();
        for (name, value) in &self.params {
            let (_, kind) = allowlist
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| ConfigError::UnknownParam(name.clone()))?;
            params.insert(name.clone(), canonical_param(name, value, *kind)?);
        }
        Ok(ModelConfig {
            provider: self.provider.clone(),
            model: self.model.clone(),
            params,
        })
    }
}

fn canonical_param(name: &str, value: &ParamValue, kind: ParamKind) -> Result<ParamValue, ConfigError> {
    match kind {
        ParamKind::Float { min, max } => {
            let x = match value {
                ParamValue::Float(x) => *x,
                ParamValue::Int(i) => *i as f64,
                other => {
                    return Err(ConfigError::WrongType {
                        name: name.to_string(),
                        expected: "a number",
                        value: other.to_string(),
                    })
                }
            };
            if !(min..=max).contains(&x) {
                return Err(ConfigError::OutOfRange {
                    name: name.to_string(),
                    value: x.to_string(),
                    min: min.to_string(),
                    max: max.to_string(),
                });
            }
            Ok(ParamValue::Float(x))
        }
        ParamKind::Int { min, max } => {
            let i = match value {
                ParamValue::Int(i) => *i,
                ParamValue::Float(x) if x.fract() == 0.0 && x.is_finite() => *x as i64,
                other => {
                    return Err(ConfigError::WrongType {
                        name: name.to_string(),
                        expected: "an integer",
                        value: other.to_string(),
                    })
                }
            };
            if !(min..=max).contains(&i) {
                return Err(ConfigError::OutOfRange {
                    name: name.to_string(),
                    value: i.to_string(),
                    min: min.to_string(),
                    max: max.to_string(),
                });
            }
            Ok(ParamValue::Int(i))
        }
    }
}

/// Content hash identifying an agent: lowercase hex SHA-256 over the
/// canonical JSON of the configuration and template text, keys sorted.
///
/// Callers should pass a config already canonicalized by
/// [`ModelConfig::validate`].
pub fn agent_fingerprint(config: &ModelConfig, template_text: &str) -> String {
    let canonical = serde_json::json!({
        "config": config,
        "template_text": template_text,
    });
    // serde_json::Value objects are BTreeMap-backed, so keys serialize sorted.
    let bytes = serde_json::to_vec(&canonical).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// An LLM annotator: model configuration plus prompt template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: AgentId,
    pub config: ModelConfig,
    pub template_id: TemplateId,
    pub fingerprint: String,
}

/// A numeric artifact attached to an annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationMetadata {
    pub name: String,
    pub value: f64,
}

impl AnnotationMetadata {
    pub fn confidence(value: f64) -> Self {
        AnnotationMetadata {
            name: CONFIDENCE_KEY.to_string(),
            value,
        }
    }
}

/// Key of one LLM annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AnnotationRef {
    pub record_id: RecordId,
    pub agent_id: AgentId,
    pub job_id: JobId,
}

impl fmt::Display for AnnotationRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.record_id, self.agent_id, self.job_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("annotation reference must look like <record>:<agent>:<job>, got {0:?}")]
pub struct ParseAnnotationRefError(String);

impl std::str::FromStr for AnnotationRef {
    type Err = ParseAnnotationRefError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseAnnotationRefError(s.to_string());
        let mut parts = s.split(':');
        let mut next = || -> Result<u64, ParseAnnotationRefError> {
            parts.next().ok_or_else(err)?.trim().parse().map_err(|_| err())
        };
        let r = AnnotationRef {
            record_id: RecordId(next()?),
            agent_id: AgentId(next()?),
            job_id: JobId(next()?),
        };
        if parts.next().is_some() {
            return Err(err());
        }
        Ok(r)
    }
}

/// A schema-valid label produced by an agent during a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub record_id: RecordId,
    pub label: Label,
    pub agent_id: AgentId,
    pub job_id: JobId,
    #[serde(default)]
    pub metadata: Vec<AnnotationMetadata>,
    pub created_at: DateTime<Utc>,
}

impl Annotation {
    pub fn reference(&self) -> AnnotationRef {
        AnnotationRef {
            record_id: self.record_id,
            agent_id: self.agent_id,
            job_id: self.job_id,
        }
    }

    pub fn metadata_value(&self, name: &str) -> Option<f64> {
        self.metadata.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn confidence(&self) -> Option<f64> {
        self.metadata_value(CONFIDENCE_KEY)
    }
}

/// A slice of records produced by a search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub id: SubsetId,
    pub record_ids: Vec<RecordId>,
    pub query: FilterExpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerificationStatus {
    Confirmed,
    Corrected,
}

/// A human decision layered over an LLM annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub annotation_ref: AnnotationRef,
    pub verifier_id: String,
    pub status: VerificationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_label: Option<Label>,
    pub created_at: DateTime<Utc>,
}

impl Verification {
    /// True when `corrected_label` is present exactly for CORRECTED.
    pub fn is_well_formed(&self) -> bool {
        match self.status {
            VerificationStatus::Confirmed => self.corrected_label.is_none(),
            VerificationStatus::Corrected => self.corrected_label.is_some(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nli() -> LabelSchema {
        LabelSchema::new("nli", ["entailment", "not entailment"])
    }

    #[test]
    fn nli_schema_is_valid() {
        assert!(validate_schema(&nli()).is_empty());
    }

    #[test]
    fn single_option_schema_is_rejected() {
        let v = validate_schema(&LabelSchema::new("x", ["a"]));
        assert_eq!(v, vec![SchemaViolation::TooFewOptions]);
        assert_eq!(v[0].to_string(), "fewer than 2 options");
    }

    #[test]
    fn options_equal_after_normalization_are_duplicates() {
        let v = validate_schema(&LabelSchema::new("x", ["Yes", " yes "]));
        assert!(matches!(
            v.as_slice(),
            [SchemaViolation::DuplicateAfterNormalization { .. }]
        ));
        assert!(v[0].to_string().starts_with("duplicate after normalization"));
    }

    #[test]
    fn blank_option_and_name_are_reported() {
        let mut s = LabelSchema::new("has space", ["a", "  ", "b"]);
        s.name = "has space".into();
        let v = validate_schema(&s);
        assert!(v.contains(&SchemaViolation::InvalidName));
        assert!(v.contains(&SchemaViolation::EmptyOption { index: 1 }));
    }

    #[test]
    fn label_validation_is_byte_exact() {
        let schema = nli();
        assert!(validate_label(&schema.label("entailment"), &schema).is_ok());
        assert_eq!(
            validate_label(&schema.label("notentailed"), &schema),
            Err(LabelError::NotAnOption {
                value: "notentailed".into()
            })
        );
        assert!(validate_label(&schema.label("Entailment"), &schema).is_err());
    }

    #[test]
    fn label_from_older_version_is_stale() {
        let v1 = nli();
        let mut v2 = LabelSchema::new("nli", ["entailment", "neutral", "contradiction"]);
        v2.version = 2;
        let err = validate_label(&v1.label("entailment"), &v2).unwrap_err();
        assert!(matches!(
            err,
            LabelError::StaleVersion {
                label_version: 1,
                schema_version: 2
            }
        ));
    }

    #[test]
    fn fingerprint_ignores_key_order() {
        let a: ModelConfig = serde_json::from_str(
            r#"{"provider":"openai","model":"davinci","params":{"temperature":0,"max_tokens":16}}"#,
        )
        .unwrap();
        let b: ModelConfig = serde_json::from_str(
            r#"{"params":{"max_tokens":16,"temperature":0.0},"model":"davinci","provider":"openai"}"#,
        )
        .unwrap();
        let (a, b) = (a.validate().unwrap(), b.validate().unwrap());
        assert_eq!(agent_fingerprint(&a, "t {input}"), agent_fingerprint(&b, "t {input}"));
    }

    #[test]
    fn fingerprint_sensitive_to_params_and_text() {
        let base = ModelConfig::new("openai", "davinci");
        let zero = base.clone().with_param("temperature", 0.0);
        let t = "Text: {input}";
        assert_ne!(agent_fingerprint(&base, t), agent_fingerprint(&zero, t));
        assert_ne!(agent_fingerprint(&base, t), agent_fingerprint(&base, "Text:  {input}"));
        let fp = agent_fingerprint(&base, t);
        assert_eq!(fp.len(), 64);
        assert!(fp.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
    }

    #[test]
    fn config_range_and_allowlist() {
        let hot = ModelConfig::new("openai", "davinci").with_param("temperature", 5.0);
        let err = hot.validate().unwrap_err();
        assert!(err.to_string().starts_with("temperature out of range"));
        assert_eq!(err.param(), Some("temperature"));

        let unknown = ModelConfig::new("openai", "davinci").with_param("frobnicate", 1i64);
        assert_eq!(
            unknown.validate().unwrap_err(),
            ConfigError::UnknownParam("frobnicate".into())
        );

        let ok = ModelConfig::new("mock", "m")
            .with_param("temperature", 0i64)
            .with_param("max_tokens", 16.0)
            .validate()
            .unwrap();
        assert_eq!(ok.params["temperature"], ParamValue::Float(0.0));
        assert_eq!(ok.max_tokens(), Some(16));

        assert!(ModelConfig::new("nope", "m").validate().is_err());
        assert_eq!(ModelConfig::new("mock", " ").validate(), Err(ConfigError::EmptyModel));
    }

    #[test]
    fn annotation_ref_parses_and_displays() {
        let r: AnnotationRef = "3:1:2".parse().unwrap();
        assert_eq!(r.record_id, RecordId(3));
        assert_eq!(r.to_string(), "3:1:2");
        assert!("3:1".parse::<AnnotationRef>().is_err());
        assert!("3:1:2:4".parse::<AnnotationRef>().is_err());
    }
}
