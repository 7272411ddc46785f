//! Provider-agnostic completion calls.
//!
//! Provider failures are sorted into three classes:
//!
//! * **retryable** (rate limit, timeout, overload): retried here with
//!   exponential backoff;
//! * **delegated** (connection, server fault, anything unrecognized): the
//!   provider has to fix it, so the message is relayed to the user as is;
//! * **fatal** (auth, invalid request, context length): the caller has to
//!   fix it.
//!
//! Sleeping goes through an injected [`Clock`] so retry timing can be
//! asserted without real delays.

mod clock;
mod mock;
mod openai;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use clock::{Clock, FakeClock, SystemClock};
pub use mock::{MockProvider, MockStep};
pub use openai::{OpenAiCompletions, API_KEY_ENV, BASE_URL_ENV};

use crate::model::ModelConfig;
use crate::prompt::{ByteHeuristic, PromptBudget, TokenEstimator};

/// Default number of in-flight requests per provider.
pub const DEFAULT_PROVIDER_CAP: usize = 4;

/// Upper bound on any single backoff sleep.
pub const MAX_DELAY: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub prompt: String,
    pub config: ModelConfig,
    pub request_logprobs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: Usage,
    pub raw_provider_payload: String,
}

impl ProviderResponse {
    pub fn text_only(text: impl Into<String>) -> Self {
        ProviderResponse {
            text: text.into(),
            token_logprobs: None,
            usage: Usage::default(),
            raw_provider_payload: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorClass {
    Retryable,
    Delegated,
    Fatal,
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorClass::Retryable => "RETRYABLE",
            ErrorClass::Delegated => "DELEGATED",
            ErrorClass::Fatal => "FATAL",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    RateLimit,
    Timeout,
    Overloaded,
    Connection,
    ServerFault,
    Auth,
    InvalidRequest,
    ContextLength,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 8] = [
        ErrorKind::RateLimit,
        ErrorKind::Timeout,
        ErrorKind::Overloaded,
        ErrorKind::Connection,
        ErrorKind::ServerFault,
        ErrorKind::Auth,
        ErrorKind::InvalidRequest,
        ErrorKind::ContextLength,
    ];

    pub fn class(self) -> ErrorClass {
        match self {
            ErrorKind::RateLimit | ErrorKind::Timeout | ErrorKind::Overloaded => ErrorClass::Retryable,
            ErrorKind::Connection | ErrorKind::ServerFault => ErrorClass::Delegated,
            ErrorKind::Auth | ErrorKind::InvalidRequest | ErrorKind::ContextLength => ErrorClass::Fatal,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::RateLimit => "rate_limit",
            ErrorKind::Timeout => "timeout",
            ErrorKind::Overloaded => "overloaded",
            ErrorKind::Connection => "connection",
            ErrorKind::ServerFault => "server_fault",
            ErrorKind::Auth => "auth",
            ErrorKind::InvalidRequest => "invalid_request",
            ErrorKind::ContextLength => "context_length",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A failure as reported by a provider adapter, before classification.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("HTTP {status}: {message}")]
    Http {
        status: u16,
        code: Option<String>,
        message: String,
    },
    #[error("{message}")]
    Named { type_name: String, message: String },
    #[error("{0}")]
    Connection(String),
    #[error("{0}")]
    Timeout(String),
    /// Already classified by the adapter.
    #[error("{message}")]
    Kind { kind: ErrorKind, message: String },
    #[error("{0}")]
    Other(String),
}

impl ProviderError {
    pub fn message(&self) -> String {
        match self {
            ProviderError::Http { message, .. }
            | ProviderError::Named { message, .. }
            | ProviderError::Kind { message, .. } => message.clone(),
            ProviderError::Connection(m) | ProviderError::Timeout(m) | ProviderError::Other(m) => m.clone(),
        }
    }
}

/// Maps a provider failure onto an [`ErrorKind`]. Anything unrecognized is
/// a delegated server fault.
pub fn classify_error(error: &ProviderError) -> ErrorKind {
    match error {
        ProviderError::Http { status, code, message } => classify_http(*status, code.as_deref(), message),
        ProviderError::Named { type_name, .. } => match type_name.as_str() {
            "RateLimitError" => ErrorKind::RateLimit,
            "Timeout" | "APITimeoutError" => ErrorKind::Timeout,
            "ServiceUnavailableError" | "OverloadedError" => ErrorKind::Overloaded,
            "APIConnectionError" => ErrorKind::Connection,
            "AuthenticationError" | "PermissionDeniedError" => ErrorKind::Auth,
            "InvalidRequestError" | "BadRequestError" | "NotFoundError" | "UnprocessableEntityError" => {
                ErrorKind::InvalidRequest
            }
            _ => ErrorKind::ServerFault,
        },
        ProviderError::Connection(_) => ErrorKind::Connection,
        ProviderError::Timeout(_) => ErrorKind::Timeout,
        ProviderError::Kind { kind, .. } => *kind,
        ProviderError::Other(_) => ErrorKind::ServerFault,
    }
}

fn classify_http(status: u16, code: Option<&str>, message: &str) -> ErrorKind {
    let context_overflow =
        code.is_some_and(|c| c.contains("context_length")) || message.contains("maximum context length");
    match status {
        429 => ErrorKind::RateLimit,
        408 | 504 => ErrorKind::Timeout,
        503 | 529 => ErrorKind::Overloaded,
        401 | 403 => ErrorKind::Auth,
        413 => ErrorKind::ContextLength,
        400..=499 if context_overflow => ErrorKind::ContextLength,
        400..=499 => ErrorKind::InvalidRequest,
        _ => ErrorKind::ServerFault,
    }
}

/// A classified failure returned by the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("{}({kind}) after {attempt_count} attempt(s): {message}", kind.class())]
pub struct GatewayError {
    pub kind: ErrorKind,
    pub message: String,
    pub attempt_count: u32,
}

impl GatewayError {
    pub fn class(&self) -> ErrorClass {
        self.kind.class()
    }
}

/// Exponential backoff parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub multiplier: f64,
    /// Each delay is scaled by a uniform factor in `1 ± jitter`.
    pub jitter: f64,
    /// Per-attempt timeout.
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            multiplier: 2.0,
            jitter: 0.1,
            timeout: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    pub fn without_jitter(mut self) -> Self {
        self.jitter = 0.0;
        self
    }

    /// Sleep before retry number `retry` (1-based), given a jitter sample in
    /// `[-1, 1]`. Capped at [`MAX_DELAY`].
    pub fn delay(&self, retry: u32, jitter_sample: f64) -> Duration {
        let exponent = retry.saturating_sub(1) as i32;
        let scale = 1.0 + self.jitter * jitter_sample.clamp(-1.0, 1.0);
        let secs = self.base_delay.as_secs_f64() * self.multiplier.powi(exponent) * scale;
        if !secs.is_finite() || secs >= MAX_DELAY.as_secs_f64() {
            return MAX_DELAY;
        }
        Duration::from_secs_f64(secs.max(0.0))
    }
}

/// A successful call and how many attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct CallOutcome {
    pub response: ProviderResponse,
    pub attempts: u32,
}

#[async_trait]
pub trait Provider: Send + Sync {
    async fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError>;

    /// Context window, in tokens, of `model`.
    fn context_window(&self, _model: &str) -> usize {
        PromptBudget::default().context_tokens
    }

    fn estimator(&self) -> &dyn TokenEstimator {
        &ByteHeuristic
    }
}

fn check_response(response: &ProviderResponse) -> Result<(), ProviderError> {
    if let Some(bad) = response
        .token_logprobs
        .iter()
        .flatten()
        // NaN fails this too
        .find(|t| t.logprob.is_nan() || t.logprob > 0.0)
    {
        return Err(ProviderError::Kind {
            kind: ErrorKind::ServerFault,
            message: format!(
                "provider returned invalid log-probability {} for token {:?}",
                bad.logprob, bad.token
            ),
        });
    }
    Ok(())
}

/// Calls `provider` until it succeeds, a non-retryable error occurs, or
/// `policy.max_attempts` is reached. The prompt is passed through untouched.
pub async fn call_with_retry(
    provider: &dyn Provider,
    request: &ProviderRequest,
    policy: &RetryPolicy,
    clock: &dyn Clock,
) -> Result<CallOutcome, GatewayError> {
    let max_attempts = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        let result = match tokio::time::timeout(policy.timeout, provider.complete(request)).await {
            Ok(result) => result.and_then(|r| check_response(&r).map(|()| r)),
            Err(_) => Err(ProviderError::Timeout(format!(
                "request timed out after {:?}",
                policy.timeout
            ))),
        };
        let error = match result {
            Ok(response) => {
                return Ok(CallOutcome {
                    response,
                    attempts: attempt,
                })
            }
            Err(e) => e,
        };
        let kind = classify_error(&error);
        if kind.class() != ErrorClass::Retryable || attempt >= max_attempts {
            tracing::debug!(%kind, attempt, "giving up on provider call");
            return Err(GatewayError {
                kind,
                message: error.message(),
                attempt_count: attempt,
            });
        }
        let sample = if policy.jitter > 0.0 {
            rand::random_range(-1.0..=1.0)
        } else {
            0.0
        };
        let delay = policy.delay(attempt, sample);
        tracing::debug!(%kind, attempt, ?delay, "retrying provider call");
        clock.sleep(delay).await;
        attempt += 1;
    }
}

struct Capped {
    inner: Arc<dyn Provider>,
    permits: Semaphore,
}

#[async_trait]
impl Provider for Capped {
    async fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        let _permit = self.permits.acquire().await.expect("semaphore is never closed");
        self.inner.complete(request).await
    }

    fn context_window(&self, model: &str) -> usize {
        self.inner.context_window(model)
    }

    fn estimator(&self) -> &dyn TokenEstimator {
        self.inner.estimator()
    }
}

/// Registry of providers, each behind its own concurrency cap.
pub struct Gateway {
    providers: HashMap<String, Arc<Capped>>,
    clock: Arc<dyn Clock>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.providers.keys().collect();
        names.sort();
        f.debug_struct("Gateway").field("providers", &names).finish()
    }
}

impl Gateway {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Gateway {
            providers: HashMap::new(),
            clock,
        }
    }

    pub fn with_provider(self, name: impl Into<String>, provider: Arc<dyn Provider>) -> Self {
        self.with_capped_provider(name, provider, DEFAULT_PROVIDER_CAP)
    }

    pub fn with_capped_provider(mut self, name: impl Into<String>, provider: Arc<dyn Provider>, cap: usize) -> Self {
        self.providers.insert(
            name.into(),
            Arc::new(Capped {
                inner: provider,
                permits: Semaphore::new(cap.max(1)),
            }),
        );
        self
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn has_provider(&self, name: &str) -> bool {
        self.providers.contains_key(name)
    }

    /// Token budget for prompts sent with `config`.
    pub fn budget(&self, config: &ModelConfig) -> PromptBudget {
        let default = PromptBudget::default();
        PromptBudget {
            context_tokens: self
                .providers
                .get(&config.provider)
                .map(|p| p.context_window(&config.model))
                .unwrap_or(default.context_tokens),
            max_output_tokens: config
                .max_tokens()
                .map(|n| n as usize)
                .unwrap_or(default.max_output_tokens),
        }
    }

    pub fn estimator(&self, provider: &str) -> &dyn TokenEstimator {
        match self.providers.get(provider) {
            Some(p) => p.estimator(),
            None => &ByteHeuristic,
        }
    }

    /// Routes `request` to the provider named in its config and retries per
    /// `policy`. The provider's cap applies to each attempt, not to sleeps.
    pub async fn call(&self, request: &ProviderRequest, policy: &RetryPolicy) -> Result<CallOutcome, GatewayError> {
        let Some(provider) = self.providers.get(&request.config.provider) else {
            return Err(GatewayError {
                kind: ErrorKind::InvalidRequest,
                message: format!("no provider registered under {:?}", request.config.provider),
                attempt_count: 1,
            });
        };
        call_with_retry(provider.as_ref(), request, policy, self.clock.as_ref()).await
    }
}
