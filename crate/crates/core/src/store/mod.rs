//! Persistence and query layer.
//!
//! All state lives in memory behind a reader/writer lock. Every mutation is
//! a transaction: a closure inspects the current tables and returns the write
//! operations to apply. Transactions are serialized by the write lock; when
//! the store is file-backed, each transaction is appended to a JSON-lines
//! journal (one line per transaction) before it becomes visible, and the
//! journal is replayed on open.

mod export;
mod filter;

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use export::{write_csv, write_jsonl, ExportRow};
pub use filter::{
    CmpOp, CompiledFilter, FilterError, FilterExpr, LabelEq, MetadataCmp, ReviewStatus, RowView, SortDirection,
    SortSpec, SortValue, VerifiedFilter, CREATED_AT,
};

use crate::job::{JobState, JobSummary};
use crate::model::{
    agent_fingerprint, validate_label, validate_schema, Agent, AgentId, Annotation, AnnotationMetadata, AnnotationRef,
    ConfigError, JobId, Label, LabelError, LabelSchema, ModelConfig, Record, RecordId, SchemaViolation, Subset,
    SubsetId, Verification, VerificationStatus,
};
use crate::prompt::{PromptTemplate, TemplateId};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("journal I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal line {line} is corrupt: {message}")]
    Corrupt { line: usize, message: String },
    #[error("{kind} {id} not found")]
    NotFound { kind: &'static str, id: String },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("invalid schema: {}", join_violations(.0))]
    InvalidSchema(Vec<SchemaViolation>),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("job {id} cannot move from {from:?} to {to:?}")]
    InvalidTransition { id: JobId, from: JobState, to: JobState },
    #[error("subset is empty")]
    EmptySubset,
}

fn join_violations(v: &[SchemaViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl StoreError {
    pub(crate) fn not_found(kind: &'static str, id: impl ToString) -> Self {
        StoreError::NotFound {
            kind,
            id: id.to_string(),
        }
    }
}

/// Content and source metadata of a record to import.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewRecord {
    pub content: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl NewRecord {
    pub fn new(content: impl Into<String>) -> Self {
        NewRecord {
            content: content.into(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRejection {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub ids: Vec<RecordId>,
    pub rejected: Vec<RowRejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRegistration {
    pub agent: Agent,
    /// True when an agent with the same fingerprint already existed.
    pub existing: bool,
}

/// Persisted state of an annotation job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: JobId,
    pub agent_id: AgentId,
    pub subset_id: SubsetId,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<JobSummary>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// A label and metadata extracted for one record of a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub record_id: RecordId,
    pub label: Label,
    #[serde(default)]
    pub metadata: Vec<AnnotationMetadata>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedItem {
    pub record_id: RecordId,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistReport {
    pub stored: usize,
    pub rejected: Vec<RejectedItem>,
}

/// An annotation joined with its record and verification state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub record: Record,
    pub annotation: Annotation,
    pub status: ReviewStatus,
    /// The verification that determines `status`, if any.
    pub verification: Option<Verification>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct StoredRecord {
    #[serde(flatten)]
    pub record: Record,
    pub imported_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct StoredVerification {
    pub verification: Verification,
    /// Commit order; later decisions win.
    pub seq: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub(crate) enum WriteOp {
    InsertRecords { records: Vec<StoredRecord> },
    PutSchema { schema: LabelSchema },
    PutTemplate { template: PromptTemplate },
    InsertAgent { agent: Agent },
    InsertSubset { subset: Subset },
    PutJob { job: JobRecord },
    PutAnnotation { annotation: Annotation },
    PutVerifications { verifications: Vec<Verification> },
}

type VerificationKey = (RecordId, JobId, String);

#[derive(Debug, Default)]
pub(crate) struct Tables {
    records: BTreeMap<RecordId, StoredRecord>,
    schemas: BTreeMap<String, Vec<LabelSchema>>,
    active_schema: Option<String>,
    templates: BTreeMap<TemplateId, PromptTemplate>,
    agents: BTreeMap<AgentId, Agent>,
    fingerprints: HashMap<String, AgentId>,
    subsets: BTreeMap<SubsetId, Subset>,
    jobs: BTreeMap<JobId, JobRecord>,
    annotations: BTreeMap<(RecordId, JobId), Annotation>,
    verifications: BTreeMap<VerificationKey, StoredVerification>,
    seq: u64,
}

fn next_key<K: Copy + Ord, V>(map: &BTreeMap<K, V>, raw: impl Fn(K) -> u64) -> u64 {
    map.last_key_value().map_or(1, |(k, _)| raw(*k) + 1)
}

impl Tables {
    fn apply(&mut self, op: WriteOp) {
        match op {
            WriteOp::InsertRecords { records } => {
                for r in records {
                    self.records.insert(r.record.id, r);
                }
            }
            WriteOp::PutSchema { schema } => {
                self.active_schema = Some(schema.name.clone());
                self.schemas.entry(schema.name.clone()).or_default().push(schema);
            }
            WriteOp::PutTemplate { template } => {
                self.templates.insert(template.id().clone(), template);
            }
            WriteOp::InsertAgent { agent } => {
                self.fingerprints.insert(agent.fingerprint.clone(), agent.id);
                self.agents.insert(agent.id, agent);
            }
            WriteOp::InsertSubset { subset } => {
                self.subsets.insert(subset.id, subset);
            }
            WriteOp::PutJob { job } => {
                self.jobs.insert(job.id, job);
            }
            WriteOp::PutAnnotation { annotation } => {
                self.annotations
                    .insert((annotation.record_id, annotation.job_id), annotation);
            }
            WriteOp::PutVerifications { verifications } => {
                for verification in verifications {
                    self.seq += 1;
                    let r = verification.annotation_ref;
                    let key = (r.record_id, r.job_id, verification.verifier_id.clone());
                    self.verifications.insert(
                        key,
                        StoredVerification {
                            verification,
                            seq: self.seq,
                        },
                    );
                }
            }
        }
    }

    pub(crate) fn next_record_id(&self) -> RecordId {
        RecordId(next_key(&self.records, |k| k.0))
    }

    pub(crate) fn next_job_id(&self) -> JobId {
        JobId(next_key(&self.jobs, |k| k.0))
    }

    pub(crate) fn record(&self, id: RecordId) -> Option<&Record> {
        self.records.get(&id).map(|r| &r.record)
    }

    pub(crate) fn schema(&self, name: &str) -> Option<&LabelSchema> {
        self.schemas.get(name).and_then(|v| v.last())
    }

    pub(crate) fn schema_version(&self, name: &str, version: u32) -> Option<&LabelSchema> {
        self.schemas
            .get(name)
            .and_then(|v| v.iter().find(|s| s.version == version))
    }

    pub(crate) fn job(&self, id: JobId) -> Option<&JobRecord> {
        self.jobs.get(&id)
    }

    /// Looks up an annotation, checking that the agent matches.
    pub(crate) fn annotation(&self, r: &AnnotationRef) -> Option<&Annotation> {
        self.annotations
            .get(&(r.record_id, r.job_id))
            .filter(|a| a.agent_id == r.agent_id)
    }

    /// Latest verification of an annotation across verifiers.
    pub(crate) fn latest_verification(&self, record_id: RecordId, job_id: JobId) -> Option<&Verification> {
        self.verifications
            .range((record_id, job_id, String::new())..)
            .take_while(|((r, j, _), _)| *r == record_id && *j == job_id)
            .max_by_key(|(_, v)| v.seq)
            .map(|(_, v)| &v.verification)
    }

    fn status(&self, record_id: RecordId, job_id: JobId) -> ReviewStatus {
        self.latest_verification(record_id, job_id).map(|v| v.status).into()
    }

    fn rows<'a>(&'a self, filter: &CompiledFilter<'_>) -> Vec<RowView<'a>> {
        let mut rows: Vec<RowView<'a>> = self
            .annotations
            .values()
            .filter_map(|annotation| {
                let record = &self.records.get(&annotation.record_id)?.record;
                let status = self.status(annotation.record_id, annotation.job_id);
                let row = RowView {
                    record,
                    annotation,
                    status,
                };
                filter.matches_row(&row).then_some(row)
            })
            .collect();
        filter.order_rows(&mut rows);
        rows
    }

    fn annotations_of(&self, record_id: RecordId) -> impl Iterator<Item = &Annotation> {
        self.annotations
            .range((record_id, JobId(0))..=(record_id, JobId(u64::MAX)))
            .map(|(_, a)| a)
    }

    fn search_ids(&self, filter: &CompiledFilter<'_>) -> Vec<RecordId> {
        let expr = filter.expr();
        let needs_annotations = expr.has_annotation_clause() || expr.sort.as_ref().is_some_and(|s| s.key != CREATED_AT);
        let mut keyed = Vec::new();
        for (id, stored) in &self.records {
            if !filter.matches_record(&stored.record) {
                continue;
            }
            let key = if needs_annotations {
                let matching: Vec<&Annotation> = self
                    .annotations_of(*id)
                    .filter(|a| filter.matches_annotation(a, self.status(a.record_id, a.job_id)))
                    .collect();
                if expr.has_annotation_clause() && matching.is_empty() {
                    continue;
                }
                filter.record_sort_value(stored.imported_at, matching)
            } else {
                filter.record_sort_value(stored.imported_at, [])
            };
            keyed.push((*id, key));
        }
        filter.order_records(&mut keyed);
        keyed.into_iter().map(|(id, _)| id).collect()
    }
}

/// The project database.
pub struct Store {
    tables: RwLock<Tables>,
    journal: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("path", &self.path)
            .finish_non_exhaustive()
    }
}

impl Store {
    pub fn in_memory() -> Self {
        Store {
            tables: RwLock::new(Tables::default()),
            journal: None,
            path: None,
        }
    }

    /// Opens (or creates) a journal-backed store at `path`.
    ///
    /// A torn final line left by an interrupted write is discarded; corruption
    /// anywhere else is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut tables = Tables::default();
        let mut good_len: u64 = 0;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            let mut lines = reader.split(b'\n').enumerate().peekable();
            while let Some((index, line)) = lines.next() {
                let line = line?;
                let is_last = lines.peek().is_none();
                match serde_json::from_slice::<Vec<WriteOp>>(&line) {
                    Ok(ops) => {
                        ops.into_iter().for_each(|op| tables.apply(op));
                        good_len += line.len() as u64 + 1;
                    }
                    Err(_) if line.is_empty() && is_last => {}
                    Err(e) if is_last => {
                        tracing::warn!(line = index + 1, error = %e, "discarding torn journal tail");
                    }
                    Err(e) => {
                        return Err(StoreError::Corrupt {
                            line: index + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if file.metadata()?.len() > good_len {
            file.set_len(good_len)?;
        }
        Ok(Store {
            tables: RwLock::new(tables),
            journal: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub(crate) fn read<R>(&self, f: impl FnOnce(&Tables) -> R) -> R {
        f(&self.tables.read())
    }

    /// Runs one serialized write transaction.
    pub(crate) fn write<R, E>(&self, f: impl FnOnce(&Tables) -> Result<(Vec<WriteOp>, R), E>) -> Result<R, E>
    where
        E: From<StoreError>,
    {
        let mut tables = self.tables.write();
        let (ops, out) = f(&tables)?;
        if ops.is_empty() {
            return Ok(out);
        }
        if let Some(journal) = &self.journal {
            let mut journal = journal.lock();
            let line = serde_json::to_vec(&ops).map_err(|e| StoreError::Io(std::io::Error::other(e)))?;
            journal.write_all(&line).map_err(StoreError::from)?;
            journal.write_all(b"\n").map_err(StoreError::from)?;
            journal.flush().map_err(StoreError::from)?;
        }
        for op in ops {
            tables.apply(op);
        }
        Ok(out)
    }

    // ---- records ----

    /// Imports rows in order. Rows with blank content are rejected
    /// individually; identical content is imported again as a new record.
    pub fn import_records(&self, rows: Vec<NewRecord>) -> Result<ImportReport, StoreError> {
        let now = Utc::now();
        self.write(|t| {
            let mut next = t.next_record_id().0;
            let mut report = ImportReport::default();
            let mut records = Vec::new();
            for (index, row) in rows.into_iter().enumerate() {
                if row.content.trim().is_empty() {
                    report.rejected.push(RowRejection {
                        index,
                        reason: "content is empty".to_string(),
                    });
                    continue;
                }
                let id = RecordId(next);
                next += 1;
                report.ids.push(id);
                records.push(StoredRecord {
                    record: Record {
                        id,
                        content: row.content,
                        extra: row.extra,
                    },
                    imported_at: now,
                });
            }
            let ops = if records.is_empty() {
                vec![]
            } else {
                vec![WriteOp::InsertRecords { records }]
            };
            Ok::<_, StoreError>((ops, report))
        })
    }

    pub fn record(&self, id: RecordId) -> Option<Record> {
        self.read(|t| t.record(id).cloned())
    }

    pub fn record_count(&self) -> usize {
        self.read(|t| t.records.len())
    }

    /// A page of records in id order, plus the total count.
    pub fn records(&self, offset: usize, limit: usize) -> (Vec<Record>, usize) {
        self.read(|t| {
            let page = t
                .records
                .values()
                .skip(offset)
                .take(limit)
                .map(|r| r.record.clone())
                .collect();
            (page, t.records.len())
        })
    }

    pub fn records_by_ids(&self, ids: &[RecordId]) -> Result<Vec<Record>, StoreError> {
        self.read(|t| {
            ids.iter()
                .map(|id| {
                    t.record(*id)
                        .cloned()
                        .ok_or_else(|| StoreError::not_found("record", id))
                })
                .collect()
        })
    }

    // ---- schemas ----

    /// Stores a new version of schema `name`. Unchanged options return the
    /// current version without bumping it.
    pub fn put_schema(&self, name: &str, options: Vec<String>) -> Result<LabelSchema, StoreError> {
        self.write(|t| {
            let current = t.schema(name);
            if let Some(current) = current {
                if current.options == options {
                    return Ok((vec![], current.clone()));
                }
            }
            let mut schema = LabelSchema::new(name, options);
            schema.version = current.map_or(1, |s| s.version + 1);
            let violations = validate_schema(&schema);
            if !violations.is_empty() {
                return Err(StoreError::InvalidSchema(violations));
            }
            Ok((vec![WriteOp::PutSchema { schema: schema.clone() }], schema))
        })
    }

    /// Current version of schema `name`.
    pub fn schema(&self, name: &str) -> Option<LabelSchema> {
        self.read(|t| t.schema(name).cloned())
    }

    pub fn schema_version(&self, name: &str, version: u32) -> Option<LabelSchema> {
        self.read(|t| t.schema_version(name, version).cloned())
    }

    /// Current version of the most recently updated schema.
    pub fn active_schema(&self) -> Option<LabelSchema> {
        self.read(|t| t.active_schema.as_deref().and_then(|n| t.schema(n)).cloned())
    }

    pub fn schemas(&self) -> Vec<LabelSchema> {
        self.read(|t| t.schemas.values().filter_map(|v| v.last().cloned()).collect())
    }

    // ---- templates and agents ----

    pub fn put_template(&self, template: PromptTemplate) -> Result<PromptTemplate, StoreError> {
        self.write(|t| {
            if t.schema(template.schema_name()).is_none() {
                return Err(StoreError::not_found("schema", template.schema_name()));
            }
            if t.templates.contains_key(template.id()) {
                return Ok((vec![], template));
            }
            Ok((
                vec![WriteOp::PutTemplate {
                    template: template.clone(),
                }],
                template,
            ))
        })
    }

    pub fn template(&self, id: &TemplateId) -> Option<PromptTemplate> {
        self.read(|t| t.templates.get(id).cloned())
    }

    pub fn templates(&self) -> Vec<PromptTemplate> {
        self.read(|t| t.templates.values().cloned().collect())
    }

    /// Registers an agent, or returns the existing one with the same
    /// fingerprint. The template is stored alongside when new.
    pub fn register_agent(
        &self,
        config: &ModelConfig,
        template: &PromptTemplate,
    ) -> Result<AgentRegistration, StoreError> {
        let config = config.validate()?;
        let fingerprint = agent_fingerprint(&config, template.text());
        self.write(|t| {
            if let Some(id) = t.fingerprints.get(&fingerprint) {
                return Ok((
                    vec![],
                    AgentRegistration {
                        agent: t.agents[id].clone(),
                        existing: true,
                    },
                ));
            }
            if t.schema(template.schema_name()).is_none() {
                return Err(StoreError::not_found("schema", template.schema_name()));
            }
            let agent = Agent {
                id: AgentId(next_key(&t.agents, |k| k.0)),
                config,
                template_id: template.id().clone(),
                fingerprint,
            };
            let mut ops = Vec::new();
            if !t.templates.contains_key(template.id()) {
                ops.push(WriteOp::PutTemplate {
                    template: template.clone(),
                });
            }
            ops.push(WriteOp::InsertAgent { agent: agent.clone() });
            Ok((ops, AgentRegistration { agent, existing: false }))
        })
    }

    pub fn agent(&self, id: AgentId) -> Option<Agent> {
        self.read(|t| t.agents.get(&id).cloned())
    }

    pub fn agents(&self) -> Vec<Agent> {
        self.read(|t| t.agents.values().cloned().collect())
    }

    // ---- search ----

    /// Record ids matching `filter`, without persisting a subset.
    pub fn query_records(&self, filter: &FilterExpr) -> Result<Vec<RecordId>, StoreError> {
        let compiled = filter.compile()?;
        Ok(self.read(|t| t.search_ids(&compiled)))
    }

    /// Runs `filter` and persists the result as a subset.
    pub fn search(&self, filter: &FilterExpr) -> Result<Subset, StoreError> {
        let compiled = filter.compile_nonempty()?;
        self.write(|t| {
            let subset = Subset {
                id: SubsetId(next_key(&t.subsets, |k| k.0)),
                record_ids: t.search_ids(&compiled),
                query: filter.clone(),
            };
            Ok::<_, StoreError>((vec![WriteOp::InsertSubset { subset: subset.clone() }], subset))
        })
    }

    /// Persists an explicit list of records as a subset.
    pub fn subset_from_ids(&self, record_ids: Vec<RecordId>) -> Result<Subset, StoreError> {
        self.write(|t| {
            let mut seen = std::collections::HashSet::new();
            let mut ids = Vec::with_capacity(record_ids.len());
            for id in record_ids {
                if t.record(id).is_none() {
                    return Err(StoreError::not_found("record", id));
                }
                if seen.insert(id) {
                    ids.push(id);
                }
            }
            let subset = Subset {
                id: SubsetId(next_key(&t.subsets, |k| k.0)),
                record_ids: ids,
                query: FilterExpr::default(),
            };
            Ok((vec![WriteOp::InsertSubset { subset: subset.clone() }], subset))
        })
    }

    pub fn subset(&self, id: SubsetId) -> Option<Subset> {
        self.read(|t| t.subsets.get(&id).cloned())
    }

    // ---- jobs ----

    pub fn create_job(&self, agent_id: AgentId, subset_id: SubsetId) -> Result<JobRecord, StoreError> {
        let now = Utc::now();
        self.write(|t| {
            if !t.agents.contains_key(&agent_id) {
                return Err(StoreError::not_found("agent", agent_id));
            }
            let subset = t
                .subsets
                .get(&subset_id)
                .ok_or_else(|| StoreError::not_found("subset", subset_id))?;
            if subset.record_ids.is_empty() {
                return Err(StoreError::EmptySubset);
            }
            let job = JobRecord {
                id: t.next_job_id(),
                agent_id,
                subset_id,
                state: JobState::Created,
                message: None,
                summary: None,
                created_at: now,
                updated_at: now,
            };
            Ok((vec![WriteOp::PutJob { job: job.clone() }], job))
        })
    }

    /// Moves a job to `state`, optionally attaching a summary and message.
    pub fn update_job(
        &self,
        id: JobId,
        state: JobState,
        summary: Option<JobSummary>,
        message: Option<String>,
    ) -> Result<JobRecord, StoreError> {
        let now = Utc::now();
        self.write(|t| {
            let current = t.job(id).ok_or_else(|| StoreError::not_found("job", id))?;
            if current.state != state && !current.state.can_transition_to(state) {
                return Err(StoreError::InvalidTransition {
                    id,
                    from: current.state,
                    to: state,
                });
            }
            let mut job = current.clone();
            job.state = state;
            job.updated_at = now;
            if summary.is_some() {
                job.summary = summary;
            }
            if message.is_some() {
                job.message = message;
            }
            Ok((vec![WriteOp::PutJob { job: job.clone() }], job))
        })
    }

    pub fn job(&self, id: JobId) -> Option<JobRecord> {
        self.read(|t| t.job(id).cloned())
    }

    pub fn jobs(&self) -> Vec<JobRecord> {
        self.read(|t| t.jobs.values().cloned().collect())
    }

    // ---- annotations ----

    /// Stores extracted labels for a job, each item in its own transaction.
    /// Items whose label is not an option of the referenced schema version
    /// are rejected and never stored. Re-storing the same record for the
    /// same job overwrites it.
    pub fn persist_annotations(&self, job_id: JobId, items: Vec<AnnotationItem>) -> Result<PersistReport, StoreError> {
        let agent_id = self
            .job(job_id)
            .ok_or_else(|| StoreError::not_found("job", job_id))?
            .agent_id;
        let mut report = PersistReport::default();
        for item in items {
            let record_id = item.record_id;
            let outcome = self.write(|t| {
                if t.record(record_id).is_none() {
                    return Ok((vec![], Err("record does not exist".to_string())));
                }
                let check = match t.schema_version(&item.label.schema_name, item.label.schema_version) {
                    Some(schema) => validate_label(&item.label, schema).map_err(|e| e.to_string()),
                    None => Err(format!(
                        "schema {} version {} does not exist",
                        item.label.schema_name, item.label.schema_version
                    )),
                };
                if let Err(reason) = check {
                    return Ok((vec![], Err(reason)));
                }
                let annotation = Annotation {
                    record_id,
                    label: item.label,
                    agent_id,
                    job_id,
                    metadata: item.metadata,
                    created_at: Utc::now(),
                };
                Ok::<_, StoreError>((vec![WriteOp::PutAnnotation { annotation }], Ok(())))
            })?;
            match outcome {
                Ok(()) => report.stored += 1,
                Err(reason) => report.rejected.push(RejectedItem { record_id, reason }),
            }
        }
        Ok(report)
    }

    pub fn annotation(&self, r: &AnnotationRef) -> Option<Annotation> {
        self.read(|t| t.annotation(r).cloned())
    }

    pub fn annotations_for_job(&self, job_id: JobId) -> Vec<Annotation> {
        self.read(|t| t.annotations.values().filter(|a| a.job_id == job_id).cloned().collect())
    }

    pub fn annotation_count(&self) -> usize {
        self.read(|t| t.annotations.len())
    }

    /// Full-table check: annotations whose label is not an option of the
    /// schema version it names. Always empty unless the journal was edited.
    pub fn audit_labels(&self) -> Vec<(AnnotationRef, LabelError)> {
        self.read(|t| {
            t.annotations
                .values()
                .filter_map(|a| {
                    let result = match t.schema_version(&a.label.schema_name, a.label.schema_version) {
                        Some(schema) => validate_label(&a.label, schema),
                        None => Err(LabelError::NotAnOption {
                            value: a.label.value.clone(),
                        }),
                    };
                    result.err().map(|e| (a.reference(), e))
                })
                .collect()
        })
    }

    /// Annotation rows matching `filter`, ordered by its sort (or by record
    /// then job), truncated to its limit.
    pub fn annotation_rows(&self, filter: &FilterExpr) -> Result<Vec<AnnotationRow>, StoreError> {
        let compiled = filter.compile()?;
        Ok(self.read(|t| {
            t.rows(&compiled)
                .into_iter()
                .map(|row| AnnotationRow {
                    record: row.record.clone(),
                    annotation: row.annotation.clone(),
                    status: row.status,
                    verification: t.latest_verification(row.record.id, row.annotation.job_id).cloned(),
                })
                .collect()
        }))
    }

    /// One export row per matching annotation in (record, job) order.
    /// Sorting clauses are ignored; the limit applies.
    pub fn export(&self, filter: &FilterExpr) -> Result<Vec<ExportRow>, StoreError> {
        let mut unsorted = filter.clone();
        unsorted.sort = None;
        Ok(self
            .annotation_rows(&unsorted)?
            .into_iter()
            .map(ExportRow::from_row)
            .collect())
    }

    // ---- verifications ----

    /// Verifications filtered by agent, job and status, newest first.
    pub fn verifications(
        &self,
        agent_id: Option<AgentId>,
        job_id: Option<JobId>,
        status: Option<VerificationStatus>,
    ) -> Vec<Verification> {
        self.read(|t| {
            let mut found: Vec<&StoredVerification> = t
                .verifications
                .values()
                .filter(|v| {
                    let r = &v.verification.annotation_ref;
                    agent_id.is_none_or(|a| a == r.agent_id)
                        && job_id.is_none_or(|j| j == r.job_id)
                        && status.is_none_or(|s| s == v.verification.status)
                })
                .collect();
            found.sort_by_key(|v| std::cmp::Reverse(v.seq));
            found.into_iter().map(|v| v.verification.clone()).collect()
        })
    }

    pub fn verification_count(&self) -> usize {
        self.read(|t| t.verifications.len())
    }
}

pub(crate) fn put_verifications(verifications: Vec<Verification>) -> WriteOp {
    WriteOp::PutVerifications { verifications }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::default_template;

    fn nli_store() -> Store {
        let store = Store::in_memory();
        store
            .put_schema("nli", vec!["entailment".into(), "not entailment".into()])
            .unwrap();
        store
    }

    fn job_for(store: &Store, n: usize) -> (JobRecord, Vec<RecordId>) {
        let ids = store
            .import_records((0..n).map(|i| NewRecord::new(format!("record {i}"))).collect())
            .unwrap()
            .ids;
        let schema = store.active_schema().unwrap();
        let agent = store
            .register_agent(&ModelConfig::new("mock", "m"), &default_template(&schema))
            .unwrap()
            .agent;
        let subset = store.search(&FilterExpr::limit(n)).unwrap();
        (store.create_job(agent.id, subset.id).unwrap(), ids)
    }

    #[test]
    fn import_examples() {
        let store = Store::in_memory();
        let ten = store
            .import_records((0..10).map(|i| NewRecord::new(format!("pair {i}"))).collect())
            .unwrap();
        assert_eq!(ten.ids.len(), 10);
        assert!(ten.ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(store.import_records(vec![]).unwrap(), ImportReport::default());
        let mixed = store
            .import_records(vec![NewRecord::new(""), NewRecord::new("x")])
            .unwrap();
        assert_eq!(mixed.ids.len(), 1);
        assert_eq!(
            mixed.rejected,
            vec![RowRejection {
                index: 0,
                reason: "content is empty".into()
            }]
        );
        let again = store.import_records(vec![NewRecord::new("x")]).unwrap();
        assert_ne!(again.ids, mixed.ids);
    }

    #[test]
    fn schema_versions_increment_on_change_only() {
        let store = nli_store();
        let same = store
            .put_schema("nli", vec!["entailment".into(), "not entailment".into()])
            .unwrap();
        assert_eq!(same.version, 1);
        let v2 = store
            .put_schema(
                "nli",
                vec!["entailment".into(), "neutral".into(), "contradiction".into()],
            )
            .unwrap();
        assert_eq!(v2.version, 2);
        assert_eq!(store.schema_version("nli", 1).unwrap().options.len(), 2);
        assert!(matches!(
            store.put_schema("nli", vec!["only".into()]),
            Err(StoreError::InvalidSchema(_))
        ));
    }

    #[test]
    fn agent_registration_is_idempotent() {
        let store = nli_store();
        let template = default_template(&store.active_schema().unwrap());
        let davinci = ModelConfig::new("openai", "davinci");
        let a = store.register_agent(&davinci, &template).unwrap();
        let b = store.register_agent(&davinci, &template).unwrap();
        assert!(!a.existing && b.existing);
        assert_eq!(a.agent.id, b.agent.id);
        let zero = davinci.clone().with_param("temperature", 0i64);
        let c = store.register_agent(&zero, &template).unwrap();
        assert_ne!(c.agent.id, a.agent.id);
        assert_eq!(store.agents().len(), 2);

        let err = store
            .register_agent(&davinci.with_param("temperature", 5.0), &template)
            .unwrap_err();
        assert!(err.to_string().contains("temperature out of range"));
    }

    #[test]
    fn persist_rejects_out_of_schema_labels() {
        let store = nli_store();
        let (job, ids) = job_for(&store, 3);
        let schema = store.active_schema().unwrap();
        let items = vec![
            AnnotationItem {
                record_id: ids[0],
                label: schema.label("entailment"),
                metadata: vec![],
            },
            AnnotationItem {
                record_id: ids[1],
                label: schema.label("notentailed"),
                metadata: vec![],
            },
            AnnotationItem {
                record_id: ids[2],
                label: schema.label("not entailment"),
                metadata: vec![],
            },
        ];
        let report = store.persist_annotations(job.id, items.clone()).unwrap();
        assert_eq!(report.stored, 2);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].record_id, ids[1]);
        let again = store.persist_annotations(job.id, items).unwrap();
        assert_eq!(again.stored, 2);
        assert_eq!(store.annotation_count(), 2);
        assert!(store.audit_labels().is_empty());
    }

    #[test]
    fn job_transitions_move_forward() {
        let store = nli_store();
        let (job, _) = job_for(&store, 1);
        store.update_job(job.id, JobState::Preprocessing, None, None).unwrap();
        assert!(matches!(
            store.update_job(job.id, JobState::Created, None, None),
            Err(StoreError::InvalidTransition { .. })
        ));
        store
            .update_job(job.id, JobState::Failed, None, Some("boom".into()))
            .unwrap();
        assert_eq!(store.job(job.id).unwrap().message.as_deref(), Some("boom"));
    }

    #[test]
    fn search_sorts_missing_metadata_last() {
        let store = nli_store();
        let (job, ids) = job_for(&store, 4);
        let schema = store.active_schema().unwrap();
        let conf = [Some(0.9), None, Some(0.5), Some(0.99)];
        let items = ids
            .iter()
            .zip(conf)
            .map(|(id, c)| AnnotationItem {
                record_id: *id,
                label: schema.label("entailment"),
                metadata: c.map(AnnotationMetadata::confidence).into_iter().collect(),
            })
            .collect();
        store.persist_annotations(job.id, items).unwrap();
        let f = FilterExpr {
            sort: Some(SortSpec {
                key: "conf".into(),
                direction: SortDirection::Asc,
            }),
            ..Default::default()
        };
        assert_eq!(store.query_records(&f).unwrap(), vec![ids[2], ids[0], ids[3], ids[1]]);
        let f = FilterExpr {
            metadata_cmp: Some(MetadataCmp {
                name: "conf".into(),
                op: CmpOp::Lt,
                threshold: 0.95,
            }),
            sort: Some(SortSpec {
                key: "conf".into(),
                direction: SortDirection::Asc,
            }),
            ..Default::default()
        };
        assert_eq!(store.search(&f).unwrap().record_ids, vec![ids[2], ids[0]]);
    }

    #[test]
    fn invalid_regex_is_rejected() {
        let store = nli_store();
        let f = FilterExpr {
            regex: Some("(".into()),
            ..Default::default()
        };
        assert!(matches!(
            store.search(&f),
            Err(StoreError::Filter(FilterError::InvalidRegex { .. }))
        ));
    }

    #[test]
    fn journal_replays_and_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("project.journal");
        {
            let store = Store::open(&path).unwrap();
            store
                .put_schema("nli", vec!["entailment".into(), "not entailment".into()])
                .unwrap();
            store
                .import_records(vec![NewRecord::new("a"), NewRecord::new("b")])
                .unwrap();
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"[{\"op\":\"insert_rec")
            .unwrap();
        let store = Store::open(&path).unwrap();
        assert_eq!(store.record_count(), 2);
        assert_eq!(store.active_schema().unwrap().version, 1);
        store.import_records(vec![NewRecord::new("c")]).unwrap();
        drop(store);
        let store = Store::open(&path).unwrap();
        assert_eq!(store.record_count(), 3);
        assert_eq!(store.record(RecordId(3)).unwrap().content, "c");
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.journal");
        std::fs::write(&path, b"garbage\n[]\n").unwrap();
        assert!(matches!(Store::open(&path), Err(StoreError::Corrupt { line: 1, .. })));
    }
}
