//! Prompt templates: construction, rendering, budget checks and previews.
//!
//! A template is a rule for building prompt text, never a rendered prompt.
//! Three placeholders are recognized:
//!
//! | placeholder     | replaced by                                     |
//! |-----------------|-------------------------------------------------|
//! | `{schema_name}` | the label schema name                           |
//! | `{options}`     | the schema options joined with `", "`           |
//! | `{input}`       | the record content, verbatim (exactly once)     |
//!
//! `{{` and `}}` produce literal braces. A brace that does not open a
//! `{identifier}` is kept literally, so JSON snippets survive untouched; an
//! identifier outside the set above is rejected.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{LabelSchema, Record, RecordId};

/// Text of the template produced by [`default_template`].
pub const DEFAULT_TEMPLATE_TEXT: &str = "Please label the {schema_name} of the following text as one of: {options}.\nRespond with only the label.\nText: {input}\nLabel:";

/// Identifier derived from the schema name and template text. Editing a
/// template yields a new id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateId(pub String);

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Placeholder {
    SchemaName,
    Options,
    Input,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
    #[error("template must contain the {{input}} placeholder")]
    MissingInput,
    #[error("{{input}} appears {0} times, expected exactly once")]
    RepeatedInput(usize),
    #[error("template was built for schema {expected:?}, got {found:?}")]
    SchemaMismatch { expected: String, found: String },
}

fn parse_segments(text: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("{{") {
            literal.push('{');
            rest = &rest[2..];
            continue;
        }
        if rest.starts_with("}}") {
            literal.push('}');
            rest = &rest[2..];
            continue;
        }
        if c == '{' {
            let ident_len = rest[1..]
                .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                .unwrap_or(rest.len() - 1);
            let closes = rest[1 + ident_len..].starts_with('}');
            if ident_len > 0 && closes {
                let name = &rest[1..1 + ident_len];
                let slot = match name {
                    "schema_name" => Placeholder::SchemaName,
                    "options" => Placeholder::Options,
                    "input" => Placeholder::Input,
                    other => return Err(TemplateError::UnknownPlaceholder(other.to_string())),
                };
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Slot(slot));
                rest = &rest[ident_len + 2..];
                continue;
            }
        }
        literal.push(c);
        rest = &rest[c.len_utf8()..];
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    match segments
        .iter()
        .filter(|s| **s == Segment::Slot(Placeholder::Input))
        .count()
    {
        0 => Err(TemplateError::MissingInput),
        1 => Ok(segments),
        n => Err(TemplateError::RepeatedInput(n)),
    }
}

#[derive(Deserialize)]
struct RawTemplate {
    text: String,
    schema_name: String,
    created_from_schema_version: u32,
}

/// An immutable, validated prompt template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate")]
pub struct PromptTemplate {
    id: TemplateId,
    text: String,
    schema_name: String,
    created_from_schema_version: u32,
    #[serde(skip)]
    segments: Vec<Segment>,
}

impl TryFrom<RawTemplate> for PromptTemplate {
    type Error = TemplateError;

    fn try_from(raw: RawTemplate) -> Result<Self, Self::Error> {
        PromptTemplate::with_schema_ref(raw.text, raw.schema_name, raw.created_from_schema_version)
    }
}

impl PromptTemplate {
    /// Builds a template for `schema`. Fails on unknown placeholders or when
    /// `{input}` is missing or repeated.
    pub fn new(text: impl Into<String>, schema: &LabelSchema) -> Result<Self, TemplateError> {
        Self::with_schema_ref(text, schema.name.clone(), schema.version)
    }

    pub fn with_schema_ref(
        text: impl Into<String>,
        schema_name: impl Into<String>,
        schema_version: u32,
    ) -> Result<Self, TemplateError> {
        let text = text.into();
        let schema_name = schema_name.into();
        let segments = parse_segments(&text)?;
        let mut hasher = Sha256::new();
        hasher.update(schema_name.as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        let id = TemplateId(hex::encode(&hasher.finalize()[..8]));
        Ok(PromptTemplate {
            id,
            text,
            schema_name,
            created_from_schema_version: schema_version,
            segments,
        })
    }

    pub fn id(&self) -> &TemplateId {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn schema_name(&self) -> &str {
        &self.schema_name
    }

    pub fn created_from_schema_version(&self) -> u32 {
        self.created_from_schema_version
    }

    /// Substitutes every placeholder in a single pass; the record content is
    /// inserted verbatim and never re-expanded.
    pub fn render(&self, schema: &LabelSchema, content: &str) -> Result<String, TemplateError> {
        if schema.name != self.schema_name {
            return Err(TemplateError::SchemaMismatch {
                expected: self.schema_name.clone(),
                found: schema.name.clone(),
            });
        }
        let mut out = String::with_capacity(self.text.len() + content.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(Placeholder::SchemaName) => out.push_str(&schema.name),
                Segment::Slot(Placeholder::Options) => out.push_str(&schema.options.join(", ")),
                Segment::Slot(Placeholder::Input) => out.push_str(content),
            }
        }
        Ok(out)
    }
}

/// The canonical default template for `schema`.
pub fn default_template(schema: &LabelSchema) -> PromptTemplate {
    PromptTemplate::new(DEFAULT_TEMPLATE_TEXT, schema).expect("default template is valid")
}

/// Estimates how many tokens a prompt will consume.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, prompt: &str) -> usize;
}

/// `ceil(bytes / 4)`; the fallback when a provider has no tokenizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteHeuristic;

impl TokenEstimator for ByteHeuristic {
    fn estimate(&self, prompt: &str) -> usize {
        prompt.len().div_ceil(4)
    }
}

/// Token limits a prompt must fit into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    /// Context window of the model, prompt and completion together.
    pub context_tokens: usize,
    /// Tokens reserved for the completion.
    pub max_output_tokens: usize,
}

impl Default for PromptBudget {
    fn default() -> Self {
        // davinci-era completion defaults
        PromptBudget {
            context_tokens: 4097,
            max_output_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PromptValidity {
    Valid { estimated_tokens: usize },
    TooLong { estimated_tokens: usize },
}

impl PromptValidity {
    pub fn is_valid(&self) -> bool {
        matches!(self, PromptValidity::Valid { .. })
    }

    pub fn estimated_tokens(&self) -> usize {
        match *self {
            PromptValidity::Valid { estimated_tokens } | PromptValidity::TooLong { estimated_tokens } => {
                estimated_tokens
            }
        }
    }
}

/// A prompt is valid when its estimate plus the reserved output fits the
/// context window. A zero-sized window admits nothing.
pub fn validate_prompt(prompt: &str, budget: &PromptBudget, estimator: &dyn TokenEstimator) -> PromptValidity {
    let estimated_tokens = estimator.estimate(prompt);
    if budget.context_tokens > 0 && estimated_tokens + budget.max_output_tokens <= budget.context_tokens {
        PromptValidity::Valid { estimated_tokens }
    } else {
        PromptValidity::TooLong { estimated_tokens }
    }
}

/// A rendered prompt together with its budget check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedPrompt {
    pub record_id: RecordId,
    pub prompt: String,
    pub validity: PromptValidity,
}

/// Render-and-validate step shared by previews and annotation jobs.
pub fn prepare_prompt(
    template: &PromptTemplate,
    schema: &LabelSchema,
    record: &Record,
    budget: &PromptBudget,
    estimator: &dyn TokenEstimator,
) -> Result<PreparedPrompt, TemplateError> {
    let prompt = template.render(schema, &record.content)?;
    let validity = validate_prompt(&prompt, budget, estimator);
    Ok(PreparedPrompt {
        record_id: record.id,
        prompt,
        validity,
    })
}

/// The first `n` prompts a job would send for `records`, with validity flags.
pub fn preview(
    template: &PromptTemplate,
    schema: &LabelSchema,
    records: &[Record],
    n: usize,
    budget: &PromptBudget,
    estimator: &dyn TokenEstimator,
) -> Result<Vec<PreparedPrompt>, TemplateError> {
    records
        .iter()
        .take(n)
        .map(|r| prepare_prompt(template, schema, r, budget, estimator))
        .collect()
}
