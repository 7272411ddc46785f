//! Annotation jobs: render prompts for a subset, call the provider, extract
//! labels, persist them, and report progress along the way.
//!
//! A job runs its phases in order. Provider calls for different records run
//! concurrently up to the requested parallelism (and the provider cap), but
//! every result is keyed by record id and post-processing walks the subset in
//! order, so stored annotations and summaries do not depend on scheduling.
//! Progress events come from the single loop that consumes call results, so
//! subscribers see a totally ordered stream.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use futures::stream::{self, Stream, StreamExt};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

use crate::extraction::{extract_label, response_confidence, tally_invalid, ExtractionResult, InvalidCount};
use crate::gateway::{CallOutcome, ErrorKind, Gateway, GatewayError, ProviderRequest, RetryPolicy};
use crate::model::{AgentId, AnnotationMetadata, JobId, ParamValue, RecordId, SubsetId};
use crate::prompt::{prepare_prompt, TemplateId};
use crate::store::{AnnotationItem, JobRecord, Store, StoreError};

/// Number of rendered prompts kept in the summary.
pub const SAMPLE_PROMPTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Created,
    Preprocessing,
    Calling,
    Postprocessing,
    Completed,
    Failed,
}

impl JobState {
    fn rank(self) -> u8 {
        match self {
            JobState::Created => 0,
            JobState::Preprocessing => 1,
            JobState::Calling => 2,
            JobState::Postprocessing => 3,
            JobState::Completed => 4,
            JobState::Failed => 5,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed)
    }

    /// Forward moves only; any live state may fail.
    pub fn can_transition_to(self, next: JobState) -> bool {
        if self.is_terminal() {
            return false;
        }
        next == JobState::Failed || next.rank() > self.rank()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDetails {
    pub agent_id: AgentId,
    pub provider: String,
    pub model: String,
    pub params: BTreeMap<String, ParamValue>,
    pub template_id: TemplateId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub total: usize,
    pub valid_prompts: usize,
    pub invalid_prompts: usize,
    pub sample_prompts: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallProgress {
    pub completed: usize,
    pub total: usize,
    pub attempts: u64,
    pub retries: u64,
    pub failures: usize,
    pub failures_by_kind: BTreeMap<ErrorKind, usize>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputSummary {
    pub valid_responses: usize,
    pub invalid_responses: usize,
    pub stored_annotations: usize,
    pub label_distribution: BTreeMap<String, usize>,
    pub invalid_frequency: Vec<InvalidCount>,
}

/// Statistics of one job, persisted with it.
///
/// `input.total = input.invalid_prompts + calls.failures +
/// output.invalid_responses + output.stored_annotations` holds for every
/// finished job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: JobId,
    pub subset_id: SubsetId,
    pub state: JobState,
    pub agent: AgentDetails,
    pub input: InputSummary,
    pub calls: CallProgress,
    pub output: OutputSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_message: Option<String>,
}

impl JobSummary {
    pub fn conservation_holds(&self) -> bool {
        self.input.total
            == self.input.invalid_prompts
                + self.calls.failures
                + self.output.invalid_responses
                + self.output.stored_annotations
    }

    /// Share of stored annotations carrying `label`.
    pub fn label_share(&self, label: &str) -> f64 {
        let stored = self.output.stored_annotations;
        if stored == 0 {
            return 0.0;
        }
        *self.output.label_distribution.get(label).unwrap_or(&0) as f64 / stored as f64
    }

    /// Copy with wall-clock dependent fields zeroed, for comparisons.
    pub fn without_timing(&self) -> JobSummary {
        let mut s = self.clone();
        s.calls.elapsed_ms = 0;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub job_id: JobId,
    pub phase: JobState,
    pub completed: usize,
    pub total: usize,
    /// Provider attempts so far, retries included.
    pub attempts: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ProgressEvent {
    pub fn is_terminal(&self) -> bool {
        self.phase.is_terminal()
    }
}

#[derive(Debug, Error)]
pub enum JobError {
    #[error("job {0} not found")]
    NotFound(JobId),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("parallelism must be at least 1")]
    ZeroParallelism,
}

#[derive(Debug, Clone, Copy)]
pub struct JobOptions {
    pub policy: RetryPolicy,
    pub parallelism: usize,
    pub request_logprobs: bool,
}

impl Default for JobOptions {
    fn default() -> Self {
        JobOptions {
            policy: RetryPolicy::default(),
            parallelism: 4,
            request_logprobs: true,
        }
    }
}

impl JobOptions {
    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism;
        self
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }
}

#[derive(Default)]
struct Channel {
    subscribers: Vec<mpsc::UnboundedSender<ProgressEvent>>,
    last: Option<ProgressEvent>,
}

/// Ordered stream of progress events for one job. Ends after the terminal
/// event.
#[derive(Debug)]
pub struct ProgressSubscription {
    rx: mpsc::UnboundedReceiver<ProgressEvent>,
}

impl ProgressSubscription {
    pub async fn next(&mut self) -> Option<ProgressEvent> {
        self.rx.recv().await
    }

    /// Collects every remaining event.
    pub async fn collect(mut self) -> Vec<ProgressEvent> {
        let mut events = Vec::new();
        while let Some(e) = self.next().await {
            events.push(e);
        }
        events
    }

    pub fn into_stream(self) -> impl Stream<Item = ProgressEvent> + Send + 'static {
        stream::unfold(self, |mut sub| async move { sub.next().await.map(|e| (e, sub)) })
    }
}

/// Runs annotation jobs against a store and a gateway.
pub struct JobController {
    store: Arc<Store>,
    gateway: Arc<Gateway>,
    channels: Mutex<HashMap<JobId, Channel>>,
    live: Mutex<HashMap<JobId, JobSummary>>,
}

impl std::fmt::Debug for JobController {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JobController")
            .field("gateway", &self.gateway)
            .finish_non_exhaustive()
    }
}

impl JobController {
    /// Jobs left unfinished by a previous process are marked failed, since
    /// jobs are not resumable.
    pub fn new(store: Arc<Store>, gateway: Arc<Gateway>) -> Result<Self, JobError> {
        for job in store.jobs() {
            if !job.state.is_terminal() {
                store.update_job(
                    job.id,
                    JobState::Failed,
                    None,
                    Some("job interrupted before completion".to_string()),
                )?;
            }
        }
        Ok(JobController {
            store,
            gateway,
            channels: Mutex::new(HashMap::new()),
            live: Mutex::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    /// Creates a job and runs it to completion.
    pub async fn run_job(
        &self,
        agent_id: AgentId,
        subset_id: SubsetId,
        options: JobOptions,
    ) -> Result<JobSummary, JobError> {
        if options.parallelism == 0 {
            return Err(JobError::ZeroParallelism);
        }
        let job = self.store.create_job(agent_id, subset_id)?;
        self.execute(job, options).await
    }

    /// Creates a job and runs it in the background, returning its id at once.
    pub fn start_job(
        self: &Arc<Self>,
        agent_id: AgentId,
        subset_id: SubsetId,
        options: JobOptions,
    ) -> Result<JobId, JobError> {
        if options.parallelism == 0 {
            return Err(JobError::ZeroParallelism);
        }
        let job = self.store.create_job(agent_id, subset_id)?;
        let id = job.id;
        let this = Arc::clone(self);
        tokio::spawn(async move {
            if let Err(e) = this.execute(job, options).await {
                tracing::error!(job = %id, error = %e, "job aborted");
            }
        });
        Ok(id)
    }

    /// The running job's live snapshot, or the persisted summary.
    pub fn job_summary(&self, job_id: JobId) -> Result<JobSummary, JobError> {
        if let Some(s) = self.live.lock().get(&job_id) {
            return Ok(s.clone());
        }
        let job = self.store.job(job_id).ok_or(JobError::NotFound(job_id))?;
        match &job.summary {
            Some(s) => Ok(s.clone()),
            None => Ok(self.empty_summary(&job)),
        }
    }

    fn empty_summary(&self, job: &JobRecord) -> JobSummary {
        let agent = self.store.agent(job.agent_id);
        let total = self.store.subset(job.subset_id).map_or(0, |s| s.record_ids.len());
        JobSummary {
            job_id: job.id,
            subset_id: job.subset_id,
            state: job.state,
            agent: AgentDetails {
                agent_id: job.agent_id,
                provider: agent.as_ref().map(|a| a.config.provider.clone()).unwrap_or_default(),
                model: agent.as_ref().map(|a| a.config.model.clone()).unwrap_or_default(),
                params: agent.as_ref().map(|a| a.config.params.clone()).unwrap_or_default(),
                template_id: agent.map(|a| a.template_id).unwrap_or(TemplateId(String::new())),
            },
            input: InputSummary {
                total,
                ..Default::default()
            },
            calls: CallProgress::default(),
            output: OutputSummary::default(),
            failure_message: job.message.clone(),
        }
    }

    /// Subscribes to a job's progress. A finished job yields its terminal
    /// event only.
    pub fn subscribe_progress(&self, job_id: JobId) -> Result<ProgressSubscription, JobError> {
        let job = self.store.job(job_id).ok_or(JobError::NotFound(job_id))?;
        let (tx, rx) = mpsc::unbounded_channel();
        let mut channels = self.channels.lock();
        let channel = channels.entry(job_id).or_default();
        let finished = channel.last.as_ref().filter(|e| e.is_terminal()).cloned();
        match finished {
            Some(event) => {
                let _ = tx.send(event);
            }
            None if job.state.is_terminal() => {
                let summary = job.summary.as_ref();
                let total = summary.map_or(0, |s| s.input.total);
                let _ = tx.send(ProgressEvent {
                    job_id,
                    phase: job.state,
                    completed: if job.state == JobState::Completed { total } else { 0 },
                    total,
                    attempts: summary.map_or(0, |s| s.calls.attempts),
                    timestamp: job.updated_at,
                    message: job.message.clone(),
                });
            }
            None => channel.subscribers.push(tx),
        }
        Ok(ProgressSubscription { rx })
    }

    fn emit(&self, event: ProgressEvent) {
        let mut channels = self.channels.lock();
        let channel = channels.entry(event.job_id).or_default();
        channel.subscribers.retain(|s| s.send(event.clone()).is_ok());
        if event.is_terminal() {
            channel.subscribers.clear();
        }
        channel.last = Some(event);
    }

    fn progress(&self, summary: &JobSummary, phase: JobState, completed: usize, total: usize) {
        self.emit(ProgressEvent {
            job_id: summary.job_id,
            phase,
            completed,
            total,
            attempts: summary.calls.attempts,
            timestamp: self.gateway.clock().now(),
            message: None,
        });
    }

    fn set_state(&self, summary: &mut JobSummary, state: JobState) -> Result<(), JobError> {
        summary.state = state;
        self.store.update_job(summary.job_id, state, None, None)?;
        self.live.lock().insert(summary.job_id, summary.clone());
        Ok(())
    }

    fn finish(
        &self,
        mut summary: JobSummary,
        state: JobState,
        message: Option<String>,
    ) -> Result<JobSummary, JobError> {
        summary.state = state;
        summary.failure_message = message.clone();
        self.store
            .update_job(summary.job_id, state, Some(summary.clone()), message.clone())?;
        self.live.lock().remove(&summary.job_id);
        let total = summary.input.total;
        self.emit(ProgressEvent {
            job_id: summary.job_id,
            phase: state,
            completed: if state == JobState::Completed {
                total
            } else {
                summary.calls.completed
            },
            total,
            attempts: summary.calls.attempts,
            timestamp: self.gateway.clock().now(),
            message,
        });
        Ok(summary)
    }

    async fn execute(&self, job: JobRecord, options: JobOptions) -> Result<JobSummary, JobError> {
        let mut summary = self.empty_summary(&job);
        self.live.lock().insert(job.id, summary.clone());

        let setup = (|| {
            let agent = self
                .store
                .agent(job.agent_id)
                .ok_or_else(|| format!("agent {} not found", job.agent_id))?;
            let template = self
                .store
                .template(&agent.template_id)
                .ok_or_else(|| format!("template {} not found", agent.template_id))?;
            let schema = self
                .store
                .schema(template.schema_name())
                .ok_or_else(|| format!("schema {} not found", template.schema_name()))?;
            let subset = self
                .store
                .subset(job.subset_id)
                .ok_or_else(|| format!("subset {} not found", job.subset_id))?;
            let records = self
                .store
                .records_by_ids(&subset.record_ids)
                .map_err(|e| e.to_string())?;
            Ok::<_, String>((agent, template, schema, records))
        })();
        let (agent, template, schema, records) = match setup {
            Ok(parts) => parts,
            Err(message) => return self.finish(summary, JobState::Failed, Some(message)),
        };

        // pre-processing
        self.set_state(&mut summary, JobState::Preprocessing)?;
        let total = records.len();
        let budget = self.gateway.budget(&agent.config);
        let estimator = self.gateway.estimator(&agent.config.provider);
        let mut prompts = Vec::new();
        for (i, record) in records.iter().enumerate() {
            let prepared = match prepare_prompt(&template, &schema, record, &budget, estimator) {
                Ok(p) => p,
                Err(e) => return self.finish(summary, JobState::Failed, Some(e.to_string())),
            };
            if summary.input.sample_prompts.len() < SAMPLE_PROMPTS {
                summary.input.sample_prompts.push(prepared.prompt.clone());
            }
            if prepared.validity.is_valid() {
                summary.input.valid_prompts += 1;
                prompts.push(prepared);
            } else {
                summary.input.invalid_prompts += 1;
            }
            self.progress(&summary, JobState::Preprocessing, i + 1, total);
        }
        self.live.lock().insert(job.id, summary.clone());
        if prompts.is_empty() {
            return self.finish(
                summary,
                JobState::Failed,
                Some("no prompt fits the token budget".into()),
            );
        }

        // provider calls
        self.set_state(&mut summary, JobState::Calling)?;
        let clock = self.gateway.clock().clone();
        let started = clock.now();
        summary.calls.total = prompts.len();
        let requests: Vec<(RecordId, ProviderRequest)> = prompts
            .iter()
            .map(|p| {
                let request = ProviderRequest {
                    prompt: p.prompt.clone(),
                    config: agent.config.clone(),
                    request_logprobs: options.request_logprobs,
                };
                (p.record_id, request)
            })
            .collect();
        let gateway = Arc::clone(&self.gateway);
        let policy = options.policy;
        let calls = stream::iter(requests.into_iter().map(move |(record_id, request)| {
            let gateway = Arc::clone(&gateway);
            async move { (record_id, gateway.call(&request, &policy).await) }
        }))
        .buffer_unordered(options.parallelism);
        futures::pin_mut!(calls);
        let mut outcomes: BTreeMap<RecordId, Result<CallOutcome, GatewayError>> = BTreeMap::new();
        while let Some((record_id, outcome)) = calls.next().await {
            let calls_summary = &mut summary.calls;
            match &outcome {
                Ok(ok) => {
                    calls_summary.attempts += u64::from(ok.attempts);
                    calls_summary.retries += u64::from(ok.attempts - 1);
                    calls_summary.prompt_tokens += ok.response.usage.prompt_tokens;
                    calls_summary.completion_tokens += ok.response.usage.completion_tokens;
                }
                Err(e) => {
                    calls_summary.attempts += u64::from(e.attempt_count);
                    calls_summary.retries += u64::from(e.attempt_count.saturating_sub(1));
                    calls_summary.failures += 1;
                    *calls_summary.failures_by_kind.entry(e.kind).or_default() += 1;
                }
            }
            calls_summary.completed += 1;
            calls_summary.elapsed_ms = elapsed_ms(started, clock.now());
            outcomes.insert(record_id, outcome);
            self.live.lock().insert(job.id, summary.clone());
            self.progress(
                &summary,
                JobState::Calling,
                summary.calls.completed,
                summary.calls.total,
            );
        }

        // post-processing, in subset order
        self.set_state(&mut summary, JobState::Postprocessing)?;
        let mut extracted: Vec<ExtractionResult> = Vec::new();
        let mut first_failure: Option<String> = None;
        let mut done = 0;
        for prepared in &prompts {
            match &outcomes[&prepared.record_id] {
                Err(e) => {
                    first_failure.get_or_insert_with(|| e.message.clone());
                }
                Ok(outcome) => {
                    let result = extract_label(&outcome.response, &schema);
                    if let Some(label) = result.label() {
                        let metadata = response_confidence(&outcome.response)
                            .ok()
                            .flatten()
                            .map(AnnotationMetadata::confidence)
                            .into_iter()
                            .collect();
                        let report = self.store.persist_annotations(
                            job.id,
                            vec![AnnotationItem {
                                record_id: prepared.record_id,
                                label: label.clone(),
                                metadata,
                            }],
                        )?;
                        if report.stored == 1 {
                            summary.output.valid_responses += 1;
                            summary.output.stored_annotations += 1;
                            *summary
                                .output
                                .label_distribution
                                .entry(label.value.clone())
                                .or_default() += 1;
                        } else {
                            summary.output.invalid_responses += 1;
                            extracted.push(ExtractionResult {
                                outcome: crate::extraction::ExtractionOutcome::Invalid {
                                    reason: crate::extraction::InvalidReason::NoMatch,
                                },
                                normalized_text: result.normalized_text.clone(),
                            });
                        }
                    } else {
                        summary.output.invalid_responses += 1;
                        extracted.push(result);
                    }
                }
            }
            done += 1;
            self.progress(&summary, JobState::Postprocessing, done, prompts.len());
        }
        summary.output.invalid_frequency = tally_invalid(&extracted);

        if summary.calls.failures == prompts.len() {
            let message = first_failure.unwrap_or_else(|| "all provider calls failed".into());
            return self.finish(summary, JobState::Failed, Some(message));
        }
        self.finish(summary, JobState::Completed, None)
    }
}

fn elapsed_ms(start: DateTime<Utc>, now: DateTime<Utc>) -> u64 {
    (now - start).num_milliseconds().max(0) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions_only_move_forward() {
        use JobState::*;
        assert!(Created.can_transition_to(Preprocessing));
        assert!(Calling.can_transition_to(Postprocessing));
        assert!(Calling.can_transition_to(Failed));
        assert!(!Calling.can_transition_to(Preprocessing));
        assert!(!Completed.can_transition_to(Failed));
        assert!(!Failed.can_transition_to(Completed));
    }

    #[test]
    fn label_share_of_empty_summary_is_zero() {
        let s = JobSummary {
            job_id: JobId(1),
            subset_id: SubsetId(1),
            state: JobState::Completed,
            agent: AgentDetails {
                agent_id: AgentId(1),
                provider: "mock".into(),
                model: "m".into(),
                params: BTreeMap::new(),
                template_id: TemplateId("t".into()),
            },
            input: InputSummary::default(),
            calls: CallProgress::default(),
            output: OutputSummary::default(),
            failure_message: None,
        };
        assert_eq!(s.label_share("x"), 0.0);
        assert!(s.conservation_holds());
    }
}
