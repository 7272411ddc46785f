//! JSON-over-HTTP interface.
//!
//! Every endpoint speaks JSON except exports (JSON lines or CSV) and job
//! progress (server-sent events). When a token is configured every request
//! outside `/health` and `/ui` must carry it as a bearer token.

mod error;

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, Path, Request, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

pub use error::{ApiError, ErrorBody};

use crate::job::{JobController, JobOptions, JobState, JobSummary};
use crate::model::{
    Agent, AgentId, JobId, LabelSchema, ModelConfig, Record, RecordId, Subset, SubsetId, Verification,
    VerificationStatus, CONFIDENCE_KEY,
};
use crate::prompt::{default_template, preview, PreparedPrompt, PromptBudget, PromptTemplate, TemplateId};
use crate::store::{
    write_csv, write_jsonl, AgentRegistration, CmpOp, FilterExpr, ImportReport, LabelEq, MetadataCmp, NewRecord,
    SortDirection, SortSpec, Store, VerifiedFilter,
};
use crate::verification::{self, Candidate, Referent, VerifyItem};

pub const API_TOKEN_ENV: &str = "ANNOWEAVE_API_TOKEN";

pub const DEFAULT_PAGE_SIZE: usize = 100;
pub const MAX_PAGE_SIZE: usize = 500;

/// Number of prompts a preview shows unless asked otherwise.
pub const DEFAULT_PREVIEW_SIZE: usize = 5;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub jobs: Arc<JobController>,
    pub token: Option<String>,
    pub job_options: JobOptions,
}

impl AppState {
    pub fn new(jobs: Arc<JobController>) -> Self {
        AppState {
            store: Arc::clone(jobs.store()),
            jobs,
            token: None,
            job_options: JobOptions::default(),
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    pub fn with_job_options(mut self, options: JobOptions) -> Self {
        self.job_options = options;
        self
    }
}

/// Builds the application router. `ui_dir`, when given, is served under `/ui`.
pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/records", post(import_records).get(list_records))
        .route("/schema", get(get_schema).put(put_schema))
        .route("/templates", post(create_template).get(list_templates))
        .route("/templates/preview", post(preview_template))
        .route("/agents", post(create_agent).get(list_agents))
        .route("/search", post(search))
        .route("/jobs", post(create_job).get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/progress", get(job_progress))
        .route("/candidates", get(list_candidates))
        .route("/verifications", post(post_verifications).get(list_verifications))
        .route("/export", get(export))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/health", get(|| async { Json(serde_json::json!({"status": "ok"})) }));
    let mut app = api.with_state(state);
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.layer(CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any))
}

/// Serves `router` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn require_token(State(state): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(expected.as_str()) {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or invalid bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

// ---- extractors with JSON errors ----

/// JSON body whose rejections use the API error shape.
pub struct Body<T>(pub T);

impl<S, T> FromRequest<S> for Body<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(json_rejection(e)),
        }
    }
}

fn json_rejection(e: JsonRejection) -> ApiError {
    ApiError::bad_request("invalid_request", e.body_text())
}

/// Query string whose rejections use the API error shape.
pub struct Params<T>(pub T);

impl<S, T> FromRequestParts<S> for Params<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        match axum::extract::Query::<T>::from_request_parts(parts, state).await {
            Ok(axum::extract::Query(v)) => Ok(Params(v)),
            Err(e) => Err(query_rejection(e)),
        }
    }
}

fn query_rejection(e: QueryRejection) -> ApiError {
    ApiError::bad_request("invalid_request", e.body_text())
}

// ---- pagination ----

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct PageParams {
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

impl PageParams {
    fn resolve(self) -> Result<(usize, usize), ApiError> {
        let limit = self.limit.unwrap_or(DEFAULT_PAGE_SIZE);
        if limit == 0 || limit > MAX_PAGE_SIZE {
            return Err(ApiError::bad_request(
                "invalid_request",
                format!("limit must be between 1 and {MAX_PAGE_SIZE}"),
            ));
        }
        Ok((self.offset.unwrap_or(0), limit))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
}

fn paginate<T>(all: Vec<T>, page: PageParams) -> Result<Page<T>, ApiError> {
    let (offset, limit) = page.resolve()?;
    let total = all.len();
    let items = all.into_iter().skip(offset).take(limit).collect();
    Ok(Page {
        items,
        total,
        offset,
        limit,
    })
}

// ---- records ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportRequest {
    pub records: Vec<NewRecord>,
}

async fn import_records(
    State(s): State<AppState>,
    Body(req): Body<ImportRequest>,
) -> Result<(StatusCode, Json<ImportReport>), ApiError> {
    let report = s.store.import_records(req.records)?;
    Ok((StatusCode::CREATED, Json(report)))
}

async fn list_records(
    State(s): State<AppState>,
    Params(page): Params<PageParams>,
) -> Result<Json<Page<Record>>, ApiError> {
    let (offset, limit) = page.resolve()?;
    let (items, total) = s.store.records(offset, limit);
    Ok(Json(Page {
        items,
        total,
        offset,
        limit,
    }))
}

// ---- schema ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaRequest {
    pub name: String,
    pub options: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct SchemaQuery {
    name: Option<String>,
    version: Option<u32>,
}

async fn put_schema(State(s): State<AppState>, Body(req): Body<SchemaRequest>) -> Result<Json<LabelSchema>, ApiError> {
    Ok(Json(s.store.put_schema(&req.name, req.options)?))
}

async fn get_schema(State(s): State<AppState>, Params(q): Params<SchemaQuery>) -> Result<Json<LabelSchema>, ApiError> {
    let schema = match (q.name, q.version) {
        (Some(name), Some(v)) => s.store.schema_version(&name, v),
        (Some(name), None) => s.store.schema(&name),
        (None, _) => s.store.active_schema(),
    };
    schema.map(Json).ok_or_else(|| ApiError::not_found("schema not found"))
}

fn schema_or_active(store: &Store, name: Option<&str>) -> Result<LabelSchema, ApiError> {
    match name {
        Some(n) => store
            .schema(n)
            .ok_or_else(|| ApiError::not_found(format!("schema {n} not found"))),
        None => store
            .active_schema()
            .ok_or_else(|| ApiError::not_found("no schema defined yet")),
    }
}

// ---- templates ----

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TemplateRequest {
    /// Schema name; the active schema when absent.
    #[serde(default)]
    pub schema: Option<String>,
    /// Template text; the default template when absent.
    #[serde(default)]
    pub text: Option<String>,
}

async fn create_template(
    State(s): State<AppState>,
    Body(req): Body<TemplateRequest>,
) -> Result<(StatusCode, Json<PromptTemplate>), ApiError> {
    let schema = schema_or_active(&s.store, req.schema.as_deref())?;
    let template = match req.text {
        Some(text) => PromptTemplate::new(text, &schema)?,
        None => default_template(&schema),
    };
    Ok((StatusCode::CREATED, Json(s.store.put_template(template)?)))
}

async fn list_templates(State(s): State<AppState>) -> Json<Vec<PromptTemplate>> {
    Json(s.store.templates())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PreviewRequest {
    #[serde(default)]
    pub template_id: Option<TemplateId>,
    /// Unsaved template text, rendered against `schema`.
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub schema: Option<String>,
    /// Records to render; the first records of the corpus when absent.
    #[serde(default)]
    pub record_ids: Option<Vec<RecordId>>,
    #[serde(default)]
    pub n: Option<usize>,
    /// Model whose token budget applies; the default budget when absent.
    #[serde(default)]
    pub config: Option<ModelConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewResponse {
    pub template_id: TemplateId,
    pub budget: PromptBudget,
    pub prompts: Vec<PreparedPrompt>,
}

async fn preview_template(
    State(s): State<AppState>,
    Body(req): Body<PreviewRequest>,
) -> Result<Json<PreviewResponse>, ApiError> {
    let template = match (&req.template_id, req.text) {
        (Some(id), _) => s
            .store
            .template(id)
            .ok_or_else(|| ApiError::not_found(format!("template {id} not found")))?,
        (None, text) => {
            let schema = schema_or_active(&s.store, req.schema.as_deref())?;
            match text {
                Some(text) => PromptTemplate::new(text, &schema)?,
                None => default_template(&schema),
            }
        }
    };
    let schema = schema_or_active(&s.store, Some(template.schema_name()))?;
    let n = req.n.unwrap_or(DEFAULT_PREVIEW_SIZE);
    let records = match req.record_ids {
        Some(ids) => s.store.records_by_ids(&ids)?,
        None => s.store.records(0, n).0,
    };
    let gateway = s.jobs.gateway();
    let (budget, estimator) = match &req.config {
        Some(config) => {
            let config = config.validate().map_err(crate::store::StoreError::from)?;
            (gateway.budget(&config), gateway.estimator(&config.provider))
        }
        None => (PromptBudget::default(), gateway.estimator("")),
    };
    let prompts = preview(&template, &schema, &records, n, &budget, estimator)?;
    Ok(Json(PreviewResponse {
        template_id: template.id().clone(),
        budget,
        prompts,
    }))
}

// ---- agents ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentRequest {
    pub config: ModelConfig,
    /// Stored template to use; the active schema's default when absent.
    #[serde(default)]
    pub template_id: Option<TemplateId>,
}

async fn create_agent(
    State(s): State<AppState>,
    Body(req): Body<AgentRequest>,
) -> Result<(StatusCode, Json<AgentRegistration>), ApiError> {
    let template = match &req.template_id {
        Some(id) => s
            .store
            .template(id)
            .ok_or_else(|| ApiError::not_found(format!("template {id} not found")))?,
        None => default_template(&schema_or_active(&s.store, None)?),
    };
    let reg = s.store.register_agent(&req.config, &template)?;
    let status = if reg.existing {
        StatusCode::OK
    } else {
        StatusCode::CREATED
    };
    Ok((status, Json(reg)))
}

async fn list_agents(State(s): State<AppState>) -> Json<Vec<Agent>> {
    Json(s.store.agents())
}

// ---- search ----

async fn search(State(s): State<AppState>, Body(filter): Body<FilterExpr>) -> Result<Json<Subset>, ApiError> {
    Ok(Json(s.store.search(&filter)?))
}

// ---- jobs ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRequest {
    pub agent_id: AgentId,
    #[serde(default)]
    pub subset_id: Option<SubsetId>,
    /// Explicit records, stored as a new subset.
    #[serde(default)]
    pub record_ids: Option<Vec<RecordId>>,
    #[serde(default)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobAccepted {
    pub job_id: JobId,
    pub subset_id: SubsetId,
    pub state: JobState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub id: JobId,
    pub agent_id: AgentId,
    pub subset_id: SubsetId,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub created_at: chrono::DateTime<chrono::Utc>,
    pub updated_at: chrono::DateTime<chrono::Utc>,
    pub summary: JobSummary,
}

async fn create_job(
    State(s): State<AppState>,
    Body(req): Body<JobRequest>,
) -> Result<(StatusCode, Json<JobAccepted>), ApiError> {
    let subset_id = match (req.subset_id, req.record_ids) {
        (Some(id), None) => id,
        (None, Some(ids)) => s.store.subset_from_ids(ids)?.id,
        _ => {
            return Err(ApiError::bad_request(
                "invalid_request",
                "give exactly one of subset_id and record_ids",
            ))
        }
    };
    let mut options = s.job_options;
    if let Some(p) = req.parallelism {
        options.parallelism = p;
    }
    let job_id = s.jobs.start_job(req.agent_id, subset_id, options)?;
    Ok((
        StatusCode::ACCEPTED,
        Json(JobAccepted {
            job_id,
            subset_id,
            state: JobState::Created,
        }),
    ))
}

fn job_view(s: &AppState, id: JobId) -> Result<JobView, ApiError> {
    let summary = s.jobs.job_summary(id)?;
    let job = s
        .store
        .job(id)
        .ok_or_else(|| ApiError::not_found(format!("job {id} not found")))?;
    Ok(JobView {
        id,
        agent_id: job.agent_id,
        subset_id: job.subset_id,
        state: job.state,
        message: job.message,
        created_at: job.created_at,
        updated_at: job.updated_at,
        summary,
    })
}

async fn get_job(State(s): State<AppState>, Path(id): Path<u64>) -> Result<Json<JobView>, ApiError> {
    job_view(&s, JobId(id)).map(Json)
}

async fn list_jobs(State(s): State<AppState>) -> Json<Vec<crate::store::JobRecord>> {
    Json(
        s.store
            .jobs()
            .into_iter()
            .map(|mut j| {
                j.summary = None;
                j
            })
            .collect(),
    )
}

async fn job_progress(
    State(s): State<AppState>,
    Path(id): Path<u64>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let sub = s.jobs.subscribe_progress(JobId(id))?;
    let events = sub.into_stream().map(|e| {
        Ok(Event::default()
            .event("progress")
            .json_data(&e)
            .unwrap_or_else(|_| Event::default().event("progress")))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

// ---- review ----

/// Query parameters shared by candidate listing and export.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ViewParams {
    /// Only annotations whose confidence is below this value.
    #[serde(default)]
    pub conf_lt: Option<f64>,
    /// Only annotations whose confidence is at least this value.
    #[serde(default)]
    pub conf_gte: Option<f64>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub verified: Option<VerifiedFilter>,
    #[serde(default)]
    pub agent_id: Option<AgentId>,
    #[serde(default)]
    pub job_id: Option<JobId>,
    #[serde(default)]
    pub keyword: Option<String>,
    /// `conf`, another metadata name, or `created_at`.
    #[serde(default)]
    pub sort: Option<String>,
    #[serde(default)]
    pub direction: Option<SortDirection>,
    /// Export only.
    #[serde(default)]
    pub format: Option<ExportFormat>,
    #[serde(default)]
    pub offset: Option<usize>,
    #[serde(default)]
    pub limit: Option<usize>,
}

impl ViewParams {
    fn page(&self) -> PageParams {
        PageParams {
            offset: self.offset,
            limit: self.limit,
        }
    }

    pub fn to_filter(&self, store: &Store) -> Result<FilterExpr, ApiError> {
        if self.conf_lt.is_some() && self.conf_gte.is_some() {
            return Err(ApiError::bad_request(
                "invalid_filter",
                "give at most one of conf_lt and conf_gte",
            ));
        }
        let metadata_cmp = self
            .conf_lt
            .map(|t| (CmpOp::Lt, t))
            .or(self.conf_gte.map(|t| (CmpOp::Ge, t)))
            .map(|(op, threshold)| MetadataCmp {
                name: CONFIDENCE_KEY.to_string(),
                op,
                threshold,
            });
        let label_eq = match &self.label {
            Some(value) => Some(LabelEq {
                schema_name: schema_or_active(store, None)?.name,
                value: value.clone(),
            }),
            None => None,
        };
        let sort = self.sort.as_ref().map(|key| SortSpec {
            key: if key == "confidence" {
                CONFIDENCE_KEY.to_string()
            } else {
                key.clone()
            },
            direction: self.direction.unwrap_or_default(),
        });
        Ok(FilterExpr {
            keyword: self.keyword.clone(),
            label_eq,
            metadata_cmp,
            verified: self.verified,
            agent_id: self.agent_id,
            job_id: self.job_id,
            sort,
            ..Default::default()
        })
    }
}

async fn list_candidates(
    State(s): State<AppState>,
    Params(q): Params<ViewParams>,
) -> Result<Json<Page<Candidate>>, ApiError> {
    let filter = q.to_filter(&s.store)?;
    let all = verification::candidates(&s.store, &filter)?;
    Ok(Json(paginate(all, q.page())?))
}

/// One decision or a batch applied all-or-nothing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VerifyRequest {
    Batch { items: Vec<VerifyItem> },
    Single(VerifyItem),
}

async fn post_verifications(
    State(s): State<AppState>,
    Body(req): Body<VerifyRequest>,
) -> Result<(StatusCode, Json<Vec<Verification>>), ApiError> {
    let stored = match req {
        VerifyRequest::Single(item) => vec![verification::verify(&s.store, item)?],
        VerifyRequest::Batch { items } => verification::verify_batch(&s.store, items)?,
    };
    Ok((StatusCode::CREATED, Json(stored)))
}

#[derive(Debug, Clone, Default, Deserialize)]
struct VerificationQuery {
    agent_id: Option<AgentId>,
    job_id: Option<JobId>,
    status: Option<VerificationStatus>,
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn list_verifications(
    State(s): State<AppState>,
    Params(q): Params<VerificationQuery>,
) -> Result<Json<Page<Verification>>, ApiError> {
    let all = match (q.agent_id, q.job_id) {
        (Some(a), None) => verification::verifications_by(&s.store, Referent::Agent(a), q.status)?,
        (None, Some(j)) => verification::verifications_by(&s.store, Referent::Job(j), q.status)?,
        (None, None) => s.store.verifications(None, None, q.status),
        (Some(_), Some(_)) => {
            return Err(ApiError::bad_request(
                "invalid_request",
                "give at most one of agent_id and job_id",
            ))
        }
    };
    let page = PageParams {
        offset: q.offset,
        limit: q.limit,
    };
    Ok(Json(paginate(all, page)?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    #[default]
    Jsonl,
    Csv,
}

/// Whole export matching the view; pagination parameters are ignored.
async fn export(State(s): State<AppState>, Params(q): Params<ViewParams>) -> Result<Response, ApiError> {
    let filter = q.to_filter(&s.store)?;
    let rows = s.store.export(&filter)?;
    let mut buf = Vec::new();
    let content_type = match q.format.unwrap_or_default() {
        ExportFormat::Jsonl => {
            write_jsonl(&rows, &mut buf).map_err(internal)?;
            "application/x-ndjson"
        }
        ExportFormat::Csv => {
            write_csv(&rows, &mut buf).map_err(internal)?;
            "text/csv"
        }
    };
    Ok(([(header::CONTENT_TYPE, content_type)], buf).into_response())
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}
