//! Command-line client for the HTTP API, plus `serve` to host it.
//!
//! Every command except `serve` talks to a running server. With `--json`
//! the raw response body is printed; otherwise a short human summary.
//! Exit codes: 0 on success, 1 on validation errors (bad arguments or input
//! files, requests the server rejects with 4xx), 2 on service errors
//! (connection problems, server faults, failed jobs).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use futures::StreamExt;
use reqwest::Method;
use serde_json::{json, Value};

use crate::api::{self, AppState, ErrorBody};
use crate::gateway::{Gateway, MockProvider, MockStep, OpenAiCompletions, SystemClock};
use crate::job::JobController;
use crate::model::AnnotationRef;
use crate::store::{NewRecord, Store};

/// `println!` that ignores a closed stdout, so piping into `head` is not a crash.
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub const URL_ENV: &str = "ANNOWEAVE_URL";
pub const DEFAULT_URL: &str = "http://127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(name = "annoweave", version, about = "Collaborative LLM text annotation")]
pub struct Cli {
    /// Print raw JSON responses.
    #[arg(long, global = true)]
    pub json: bool,
    /// Server base URL.
    #[arg(long, global = true, env = URL_ENV, default_value = DEFAULT_URL)]
    pub url: String,
    /// Bearer token for the server.
    #[arg(long, global = true, env = api::API_TOKEN_ENV, hide_env_values = true)]
    pub token: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Import records from a CSV, JSON-lines or plain-text file.
    Import(ImportArgs),
    /// Define or show the label schema.
    #[command(subcommand)]
    Schema(SchemaCommand),
    /// Create or preview prompt templates.
    #[command(subcommand)]
    Template(TemplateCommand),
    /// Register annotation agents.
    #[command(subcommand)]
    Agent(AgentCommand),
    /// Search records and store the result as a subset.
    Search(SearchArgs),
    /// Run and inspect annotation jobs.
    #[command(subcommand)]
    Job(JobCommand),
    /// List annotations for review.
    Candidates(CandidateArgs),
    /// Confirm or correct an annotation.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// List recorded verifications.
    Verifications(VerificationsArgs),
    /// Export annotations with their final labels.
    Export(ExportArgs),
    /// Run the HTTP server.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    pub file: PathBuf,
    /// CSV column holding the text.
    #[arg(long, default_value = "content")]
    pub content_column: String,
}

#[derive(Debug, Subcommand)]
pub enum SchemaCommand {
    /// Store a new schema version from a JSON file `{"name", "options"}`.
    Set { file: PathBuf },
    /// Show the active schema.
    Show {
        #[arg(long)]
        name: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TemplateCommand {
    /// Create a template, the default one unless a file is given.
    New {
        #[arg(long)]
        from_schema: String,
        #[arg(long)]
        template_file: Option<PathBuf>,
    },
    /// Render the first prompts a job would send.
    Preview {
        #[arg(long)]
        template: Option<String>,
        #[arg(long, short)]
        n: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AgentCommand {
    Create {
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "openai")]
        provider: String,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        max_tokens: Option<i64>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        seed: Option<i64>,
        /// Template id; the active schema's default template when absent.
        #[arg(long)]
        template: Option<String>,
    },
    List,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Verified {
    Any,
    Unverified,
    Confirmed,
    Corrected,
}

impl Verified {
    fn as_str(self) -> &'static str {
        match self {
            Verified::Any => "ANY",
            Verified::Unverified => "UNVERIFIED",
            Verified::Confirmed => "CONFIRMED",
            Verified::Corrected => "CORRECTED",
        }
    }
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub keyword: Option<String>,
    #[arg(long)]
    pub regex: Option<String>,
    /// Label value in the active schema.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long)]
    pub conf_lt: Option<f64>,
    #[arg(long)]
    pub verified: Option<Verified>,
    #[arg(long)]
    pub agent: Option<u64>,
    #[arg(long)]
    pub job: Option<u64>,
    #[arg(long)]
    pub sort: Option<String>,
    #[arg(long)]
    pub desc: bool,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum JobCommand {
    /// Start a job; with --wait, follow it to the end.
    Run {
        #[arg(long)]
        agent: u64,
        #[arg(long, conflicts_with = "records")]
        subset: Option<u64>,
        /// Comma-separated record ids.
        #[arg(long, value_delimiter = ',')]
        records: Option<Vec<u64>>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        wait: bool,
    },
    /// Show a job's state and summary.
    Status {
        id: u64,
        /// Stream progress until the job ends.
        #[arg(long)]
        follow: bool,
    },
}

#[derive(Debug, Args)]
pub struct CandidateArgs {
    #[arg(long)]
    pub conf_lt: Option<f64>,
    #[arg(long)]
    pub verified: Option<Verified>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub agent: Option<u64>,
    #[arg(long)]
    pub job: Option<u64>,
    /// `conf` or `created_at`.
    #[arg(long)]
    pub sort: Option<String>,
    #[arg(long)]
    pub desc: bool,
    #[arg(long)]
    pub offset: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    Confirm {
        /// `<record>:<agent>:<job>`
        reference: String,
        #[arg(long, env = "USER")]
        verifier: String,
    },
    Correct {
        reference: String,
        #[arg(long)]
        label: String,
        #[arg(long, env = "USER")]
        verifier: String,
    },
}

#[derive(Debug, Args)]
pub struct VerificationsArgs {
    #[arg(long, conflicts_with = "job")]
    pub agent: Option<u64>,
    #[arg(long)]
    pub job: Option<u64>,
    #[arg(long, value_parser = ["CONFIRMED", "CORRECTED"])]
    pub status: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Jsonl,
    Csv,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub verified: Option<Verified>,
    #[arg(long)]
    pub agent: Option<u64>,
    #[arg(long)]
    pub job: Option<u64>,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: Format,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Journal file; the database is in memory when absent.
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// Directory served under /ui.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Concurrent calls allowed per provider.
    #[arg(long, default_value_t = 4)]
    pub provider_cap: usize,
    /// Registers a `mock` provider that always answers this text.
    #[arg(long)]
    pub mock_response: Option<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Api { status: u16, code: String, message: String },
    Transport(String),
    Io(String),
    JobFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Api { status, .. } if (400..500).contains(status) => 1,
            _ => 2,
        }
    }

    fn code(&self) -> &str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Api { code, .. } => code,
            CliError::Transport(_) => "connection",
            CliError::Io(_) => "io",
            CliError::JobFailed(_) => "job_failed",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Transport(m) | CliError::Io(m) | CliError::JobFailed(m) => m,
            CliError::Api { message, .. } => message,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error[{}]: {}", self.code(), self.message())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// HTTP client for the API.
#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
    token: Option<String>,
}

impl Client {
    pub fn new(base: impl Into<String>, token: Option<String>) -> Self {
        Client {
            http: reqwest::Client::new(),
            base: base.into().trim_end_matches('/').to_string(),
            token,
        }
    }

    fn builder(&self, method: Method, path: &str) -> reqwest::RequestBuilder {
        let mut b = self.http.request(method, format!("{}{}", self.base, path));
        if let Some(t) = &self.token {
            b = b.bearer_auth(t);
        }
        b
    }

    async fn send(&self, b: reqwest::RequestBuilder) -> Result<reqwest::Response, CliError> {
        let resp = b.send().await.map_err(|e| CliError::Transport(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().await.unwrap_or_default();
        let body = serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| serde_json::from_value::<ErrorBody>(v["error"].clone()).ok());
        Err(match body {
            Some(ErrorBody { code, message }) => CliError::Api { status, code, message },
            None => CliError::Api {
                status,
                code: "http".into(),
                message: format!("HTTP {status}: {text}"),
            },
        })
    }

    pub async fn call(&self, method: Method, path: &str, body: Option<&Value>) -> Result<Value, CliError> {
        let mut b = self.builder(method, path);
        if let Some(body) = body {
            b = b.json(body);
        }
        let resp = self.send(b).await?;
        resp.json().await.map_err(|e| CliError::Transport(e.to_string()))
    }

    pub async fn get_text(&self, path: &str, query: &[(&str, String)]) -> Result<String, CliError> {
        let resp = self.send(self.builder(Method::GET, path).query(query)).await?;
        resp.text().await.map_err(|e| CliError::Transport(e.to_string()))
    }

    pub async fn get_query(&self, path: &str, query: &[(&str, String)]) -> Result<Value, CliError> {
        let resp = self.send(self.builder(Method::GET, path).query(query)).await?;
        resp.json().await.map_err(|e| CliError::Transport(e.to_string()))
    }

    /// Streams a job's progress events, calling `on_event` for each.
    pub async fn follow(&self, job_id: u64, mut on_event: impl FnMut(&Value)) -> Result<(), CliError> {
        let resp = self
            .send(self.builder(Method::GET, &format!("/jobs/{job_id}/progress")))
            .await?;
        let mut stream = resp.bytes_stream();
        let mut buf = String::new();
        while let Some(chunk) = stream.next().await {
            let chunk = chunk.map_err(|e| CliError::Transport(e.to_string()))?;
            buf.push_str(&String::from_utf8_lossy(&chunk));
            while let Some(end) = buf.find("\n\n") {
                let frame: String = buf.drain(..end + 2).collect();
                let data: String = frame
                    .lines()
                    .filter_map(|l| l.strip_prefix("data:"))
                    .map(str::trim_start)
                    .collect();
                if data.is_empty() {
                    continue;
                }
                let event: Value = serde_json::from_str(&data).map_err(|e| CliError::Transport(e.to_string()))?;
                on_event(&event);
                if matches!(event["phase"].as_str(), Some("COMPLETED" | "FAILED")) {
                    return Ok(());
                }
            }
        }
        Ok(())
    }
}

/// Reads records from `path`: CSV by extension `.csv`, JSON lines by
/// `.jsonl`/`.ndjson`, otherwise one record per non-empty line.
/// A missing or unreadable input file is the caller's mistake, not an I/O
/// failure of the tool.
fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

pub fn read_records(path: &Path, content_column: &str) -> Result<Vec<NewRecord>, CliError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let text = read_input(path)?;
    match ext.as_str() {
        "csv" => {
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            let headers = reader.headers().map_err(|e| CliError::Usage(e.to_string()))?.clone();
            let col = headers
                .iter()
                .position(|h| h == content_column)
                .ok_or_else(|| CliError::Usage(format!("CSV has no column {content_column:?}")))?;
            reader
                .records()
                .map(|row| {
                    let row = row.map_err(|e| CliError::Usage(e.to_string()))?;
                    let extra = headers
                        .iter()
                        .zip(row.iter())
                        .enumerate()
                        .filter(|(i, _)| *i != col)
                        .map(|(_, (h, v))| (h.to_string(), v.to_string()))
                        .collect();
                    Ok(NewRecord {
                        content: row.get(col).unwrap_or("").to_string(),
                        extra,
                    })
                })
                .collect()
        }
        "jsonl" | "ndjson" => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let v: serde_json::Map<String, Value> =
                    serde_json::from_str(line).map_err(|e| CliError::Usage(format!("line {}: {e}", i + 1)))?;
                let mut content = String::new();
                let mut extra = BTreeMap::new();
                for (k, v) in v {
                    match v {
                        Value::Object(nested) if k == "extra" => {
                            extra.extend(nested.into_iter().map(|(k, v)| (k, plain(v))));
                        }
                        v if k == content_column => content = plain(v),
                        v => {
                            extra.insert(k, plain(v));
                        }
                    }
                }
                Ok(NewRecord { content, extra })
            })
            .collect(),
        _ => Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(NewRecord::new)
            .collect()),
    }
}

fn plain(v: Value) -> String {
    match v {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

/// Prints rows as left-aligned columns. The last column is not padded.
fn print_table(header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let last = cells.len().saturating_sub(1);
        let mut out = String::new();
        for (i, cell) in cells.into_iter().enumerate() {
            if i == last {
                out.push_str(cell);
            } else {
                out.push_str(&format!("{cell:<width$}  ", width = widths[i]));
            }
        }
        outln!("{}", out.trim_end());
    };
    line(header.to_vec());
    for row in rows {
        line(row.iter().map(String::as_str).collect());
    }
}

fn print_json(v: &Value) {
    outln!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn verified_params(q: &mut Vec<(&'static str, String)>, verified: Option<Verified>) {
    if let Some(v) = verified {
        q.push(("verified", v.as_str().to_string()));
    }
}

fn describe_job(v: &Value) -> String {
    let s = &v["summary"];
    let mut line = format!(
        "job {} {}: {} records, {} stored, {} invalid responses, {} invalid prompts, {} call failures, {} attempts",
        v["id"],
        v["state"].as_str().unwrap_or("?"),
        s["input"]["total"],
        s["output"]["stored_annotations"],
        s["output"]["invalid_responses"],
        s["input"]["invalid_prompts"],
        s["calls"]["failures"],
        s["calls"]["attempts"],
    );
    if let Some(m) = v["message"].as_str() {
        line.push_str(&format!("\n  message: {m}"));
    }
    if let Some(dist) = s["output"]["label_distribution"].as_object() {
        for (label, n) in dist {
            line.push_str(&format!("\n  {label}: {n}"));
        }
    }
    line
}

async fn job_result(client: &Client, id: u64, json: bool) -> Result<(), CliError> {
    let v = client.call(Method::GET, &format!("/jobs/{id}"), None).await?;
    if json {
        print_json(&v);
    } else {
        outln!("{}", describe_job(&v));
    }
    if v["state"] == "FAILED" {
        return Err(CliError::JobFailed(
            v["message"].as_str().unwrap_or("job failed").to_string(),
        ));
    }
    Ok(())
}

async fn follow_job(client: &Client, id: u64, json: bool) -> Result<(), CliError> {
    client
        .follow(id, |e| {
            if !json {
                eprintln!(
                    "{} {}/{} attempts={}",
                    e["phase"].as_str().unwrap_or("?"),
                    e["completed"],
                    e["total"],
                    e["attempts"]
                );
            }
        })
        .await?;
    job_result(client, id, json).await
}

/// Runs a parsed command.
pub async fn run(cli: Cli) -> Result<(), CliError> {
    let client = Client::new(&cli.url, cli.token.clone());
    let json = cli.json;
    match cli.command {
        Command::Serve(args) => serve(args, cli.token).await,
        Command::Import(args) => {
            let records = read_records(&args.file, &args.content_column)?;
            let v = client
                .call(Method::POST, "/records", Some(&json!({ "records": records })))
                .await?;
            if json {
                print_json(&v);
            } else {
                let ids = v["ids"].as_array().map_or(0, Vec::len);
                outln!("imported {ids} records");
                for r in v["rejected"].as_array().into_iter().flatten() {
                    outln!("  row {} rejected: {}", r["index"], r["reason"].as_str().unwrap_or(""));
                }
            }
            Ok(())
        }
        Command::Schema(SchemaCommand::Set { file }) => {
            let body: Value = serde_json::from_str(&read_input(&file)?)
                .map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))?;
            let v = client.call(Method::PUT, "/schema", Some(&body)).await?;
            if json {
                print_json(&v);
            } else {
                outln!(
                    "schema {} v{}: {}",
                    v["name"].as_str().unwrap_or(""),
                    v["version"],
                    v["options"]
                );
            }
            Ok(())
        }
        Command::Schema(SchemaCommand::Show { name }) => {
            let q: Vec<(&str, String)> = name.map(|n| ("name", n)).into_iter().collect();
            let v = client.get_query("/schema", &q).await?;
            if json {
                print_json(&v);
            } else {
                outln!(
                    "schema {} v{}: {}",
                    v["name"].as_str().unwrap_or(""),
                    v["version"],
                    v["options"]
                );
            }
            Ok(())
        }
        Command::Template(TemplateCommand::New {
            from_schema,
            template_file,
        }) => {
            let text = template_file.as_deref().map(read_input).transpose()?;
            let v = client
                .call(
                    Method::POST,
                    "/templates",
                    Some(&json!({"schema": from_schema, "text": text})),
                )
                .await?;
            if json {
                print_json(&v);
            } else {
                outln!("template {}", v["id"].as_str().unwrap_or(""));
            }
            Ok(())
        }
        Command::Template(TemplateCommand::Preview { template, n }) => {
            let v = client
                .call(
                    Method::POST,
                    "/templates/preview",
                    Some(&json!({"template_id": template, "n": n})),
                )
                .await?;
            if json {
                print_json(&v);
            } else {
                for p in v["prompts"].as_array().into_iter().flatten() {
                    let status = p["validity"]["status"].as_str().unwrap_or("?");
                    outln!(
                        "--- record {} [{status}]\n{}",
                        p["record_id"],
                        p["prompt"].as_str().unwrap_or("")
                    );
                }
            }
            Ok(())
        }
        Command::Agent(AgentCommand::Create {
            model,
            provider,
            temperature,
            max_tokens,
            top_p,
            seed,
            template,
        }) => {
            let mut params = serde_json::Map::new();
            if let Some(t) = temperature {
                params.insert("temperature".into(), json!(t));
            }
            if let Some(m) = max_tokens {
                params.insert("max_tokens".into(), json!(m));
            }
            if let Some(p) = top_p {
                params.insert("top_p".into(), json!(p));
            }
            if let Some(s) = seed {
                params.insert("seed".into(), json!(s));
            }
            let body = json!({
                "config": {"provider": provider, "model": model, "params": params},
                "template_id": template,
            });
            let v = client.call(Method::POST, "/agents", Some(&body)).await?;
            if json {
                print_json(&v);
            } else {
                let existing = if v["existing"] == true { " (existing)" } else { "" };
                outln!("agent {}{existing}", v["agent"]["id"]);
            }
            Ok(())
        }
        Command::Agent(AgentCommand::List) => {
            let v = client.call(Method::GET, "/agents", None).await?;
            if json {
                print_json(&v);
            } else {
                for a in v.as_array().into_iter().flatten() {
                    outln!(
                        "agent {}: {}/{} template {}",
                        a["id"],
                        a["config"]["provider"].as_str().unwrap_or(""),
                        a["config"]["model"].as_str().unwrap_or(""),
                        a["template_id"].as_str().unwrap_or("")
                    );
                }
            }
            Ok(())
        }
        Command::Search(args) => {
            let label_eq = match &args.label {
                Some(value) => {
                    let schema = match &args.schema {
                        Some(s) => s.clone(),
                        None => client.call(Method::GET, "/schema", None).await?["name"]
                            .as_str()
                            .unwrap_or("")
                            .to_string(),
                    };
                    Some(json!({"schema_name": schema, "value": value}))
                }
                None => None,
            };
            let mut filter = serde_json::Map::new();
            let mut put = |k: &str, v: Option<Value>| {
                if let Some(v) = v {
                    filter.insert(k.to_string(), v);
                }
            };
            put("keyword", args.keyword.map(Value::from));
            put("regex", args.regex.map(Value::from));
            put("label_eq", label_eq);
            put(
                "metadata_cmp",
                args.conf_lt.map(|t| json!({"name": "conf", "op": "<", "threshold": t})),
            );
            put("verified", args.verified.map(|v| Value::from(v.as_str())));
            put("agent_id", args.agent.map(Value::from));
            put("job_id", args.job.map(Value::from));
            put(
                "sort",
                args.sort
                    .map(|k| json!({"key": k, "direction": if args.desc { "desc" } else { "asc" }})),
            );
            put("limit", args.limit.map(Value::from));
            let v = client
                .call(Method::POST, "/search", Some(&Value::Object(filter)))
                .await?;
            if json {
                print_json(&v);
            } else {
                let n = v["record_ids"].as_array().map_or(0, Vec::len);
                outln!("subset {}: {n} records", v["id"]);
            }
            Ok(())
        }
        Command::Job(JobCommand::Run {
            agent,
            subset,
            records,
            parallelism,
            wait,
        }) => {
            if subset.is_none() && records.is_none() {
                return Err(CliError::Usage("give --subset or --records".into()));
            }
            let body = json!({
                "agent_id": agent,
                "subset_id": subset,
                "record_ids": records,
                "parallelism": parallelism,
            });
            let v = client.call(Method::POST, "/jobs", Some(&body)).await?;
            let id = v["job_id"].as_u64().unwrap_or_default();
            if wait {
                return follow_job(&client, id, json).await;
            }
            if json {
                print_json(&v);
            } else {
                outln!("job {id} started on subset {}", v["subset_id"]);
            }
            Ok(())
        }
        Command::Job(JobCommand::Status { id, follow }) => {
            if follow {
                follow_job(&client, id, json).await
            } else {
                job_result(&client, id, json).await
            }
        }
        Command::Candidates(args) => {
            let mut q: Vec<(&str, String)> = Vec::new();
            if let Some(t) = args.conf_lt {
                q.push(("conf_lt", t.to_string()));
            }
            verified_params(&mut q, args.verified);
            if let Some(l) = args.label {
                q.push(("label", l));
            }
            if let Some(a) = args.agent {
                q.push(("agent_id", a.to_string()));
            }
            if let Some(j) = args.job {
                q.push(("job_id", j.to_string()));
            }
            if let Some(s) = args.sort {
                q.push(("sort", s));
                q.push(("direction", if args.desc { "desc" } else { "asc" }.to_string()));
            }
            if let Some(o) = args.offset {
                q.push(("offset", o.to_string()));
            }
            if let Some(l) = args.limit {
                q.push(("limit", l.to_string()));
            }
            let v = client.get_query("/candidates", &q).await?;
            if json {
                print_json(&v);
            } else {
                let rows: Vec<Vec<String>> = v["items"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|c| {
                        let r = &c["annotation_ref"];
                        let mut status = c["status"].as_str().unwrap_or("").to_string();
                        if c["stale_schema"] == true {
                            status.push_str(" (stale)");
                        }
                        vec![
                            format!("{}:{}:{}", r["record_id"], r["agent_id"], r["job_id"]),
                            c["label"]["value"].as_str().unwrap_or("").to_string(),
                            c["confidence"].as_f64().map_or("-".to_string(), |x| format!("{x:.4}")),
                            status,
                            c["content"].as_str().unwrap_or("").to_string(),
                        ]
                    })
                    .collect();
                print_table(&["REF", "LABEL", "CONF", "STATUS", "TEXT"], &rows);
                outln!("{} of {}", v["items"].as_array().map_or(0, Vec::len), v["total"]);
            }
            Ok(())
        }
        Command::Verify(cmd) => {
            let (reference, verifier, decision) = match cmd {
                VerifyCommand::Confirm { reference, verifier } => (reference, verifier, json!({"decision": "confirm"})),
                VerifyCommand::Correct {
                    reference,
                    label,
                    verifier,
                } => (reference, verifier, json!({"decision": "correct", "label": label})),
            };
            let r: AnnotationRef = reference
                .parse()
                .map_err(|e: crate::model::ParseAnnotationRefError| CliError::Usage(e.to_string()))?;
            let mut body = decision;
            body["annotation_ref"] = serde_json::to_value(r).unwrap_or_default();
            body["verifier_id"] = Value::from(verifier);
            let v = client.call(Method::POST, "/verifications", Some(&body)).await?;
            if json {
                print_json(&v);
            } else {
                for item in v.as_array().into_iter().flatten() {
                    outln!("{reference} {}", item["status"].as_str().unwrap_or(""));
                }
            }
            Ok(())
        }
        Command::Verifications(args) => {
            let mut q: Vec<(&str, String)> = Vec::new();
            if let Some(a) = args.agent {
                q.push(("agent_id", a.to_string()));
            }
            if let Some(j) = args.job {
                q.push(("job_id", j.to_string()));
            }
            if let Some(s) = args.status {
                q.push(("status", s));
            }
            let v = client.get_query("/verifications", &q).await?;
            if json {
                print_json(&v);
            } else {
                for item in v["items"].as_array().into_iter().flatten() {
                    let r = &item["annotation_ref"];
                    outln!(
                        "{}:{}:{} {} by {} at {}",
                        r["record_id"],
                        r["agent_id"],
                        r["job_id"],
                        item["status"].as_str().unwrap_or(""),
                        item["verifier_id"].as_str().unwrap_or(""),
                        item["created_at"].as_str().unwrap_or("")
                    );
                }
            }
            Ok(())
        }
        Command::Export(args) => {
            let mut q: Vec<(&str, String)> = vec![(
                "format",
                match args.format {
                    Format::Jsonl => "jsonl",
                    Format::Csv => "csv",
                }
                .to_string(),
            )];
            verified_params(&mut q, args.verified);
            if let Some(a) = args.agent {
                q.push(("agent_id", a.to_string()));
            }
            if let Some(j) = args.job {
                q.push(("job_id", j.to_string()));
            }
            let text = client.get_text("/export", &q).await?;
            match args.output {
                Some(path) => {
                    std::fs::write(&path, &text)?;
                    if !json {
                        eprintln!("wrote {}", path.display());
                    }
                }
                None => {
                    let _ = std::io::Write::write_all(&mut std::io::stdout(), text.as_bytes());
                }
            }
            Ok(())
        }
    }
}

async fn serve(args: ServeArgs, token: Option<String>) -> Result<(), CliError> {
    // RUST_LOG overrides; errors are always shown
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "annoweave=info".into()),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let store = match &args.db {
        Some(path) => Store::open(path).map_err(|e| CliError::Io(e.to_string()))?,
        None => Store::in_memory(),
    };
    let mut gateway = Gateway::new(Arc::new(SystemClock)).with_capped_provider(
        "openai",
        Arc::new(OpenAiCompletions::from_env()),
        args.provider_cap,
    );
    if let Some(text) = args.mock_response {
        gateway = gateway.with_capped_provider(
            "mock",
            Arc::new(MockProvider::always(MockStep::respond(text))),
            args.provider_cap,
        );
    }
    let jobs = JobController::new(Arc::new(store), Arc::new(gateway)).map_err(|e| CliError::Io(e.to_string()))?;
    let state = AppState::new(Arc::new(jobs)).with_token(token);
    let listener = tokio::net::TcpListener::bind(&args.addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    api::serve(listener, api::router(state, args.ui_dir)).await?;
    Ok(())
}

/// Entry point for the binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprint!("error[usage]: {}", text.strip_prefix("error: ").unwrap_or(&text));
            return ExitCode::from(1);
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error[io]: {e}");
            return ExitCode::from(2);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
