//! The completions adapter against a local stub server.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use annoweave::gateway::{ErrorKind, Gateway, OpenAiCompletions, ProviderRequest, RetryPolicy, SystemClock};
use annoweave::model::ModelConfig;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use parking_lot::Mutex;
use serde_json::{json, Value};

type Seen = Vec<(Option<String>, Value)>;

#[derive(Clone, Default)]
struct Stub {
    replies: Arc<Mutex<VecDeque<(u16, Value)>>>,
    seen: Arc<Mutex<Seen>>,
}

async fn completions(
    State(stub): State<Stub>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    let auth = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .map(String::from);
    stub.seen.lock().push((auth, body));
    let (status, reply) = stub.replies.lock().pop_front().expect("unexpected call");
    (StatusCode::from_u16(status).unwrap(), Json(reply))
}

async fn stub(replies: Vec<(u16, Value)>) -> (String, Stub) {
    let stub = Stub {
        replies: Arc::new(Mutex::new(replies.into())),
        ..Default::default()
    };
    let app = Router::new()
        .route("/v1/completions", post(completions))
        .with_state(stub.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (url, stub)
}

fn ok_payload() -> Value {
    json!({
        "id": "cmpl-1",
        "object": "text_completion",
        "choices": [{
            "text": " entailment",
            "index": 0,
            "finish_reason": "stop",
            "logprobs": {"tokens": [" ent", "ail", "ment"], "token_logprobs": [-0.1, -0.01, -0.001]}
        }],
        "usage": {"prompt_tokens": 31, "completion_tokens": 3, "total_tokens": 34}
    })
}

fn gateway(url: &str) -> Gateway {
    Gateway::new(Arc::new(SystemClock))
        .with_provider("openai", Arc::new(OpenAiCompletions::new(url, Some("sk-test".into()))))
}

fn request() -> ProviderRequest {
    ProviderRequest {
        prompt: "Text: a\nLabel:".into(),
        config: ModelConfig::new("openai", "davinci")
            .with_param("temperature", 0.0)
            .with_param("max_tokens", 8i64),
        request_logprobs: true,
    }
}

fn fast() -> RetryPolicy {
    RetryPolicy {
        base_delay: Duration::from_millis(5),
        ..RetryPolicy::default()
    }
    .without_jitter()
}

#[tokio::test]
async fn success_is_parsed_and_request_is_well_formed() {
    let (url, stub) = stub(vec![(200, ok_payload())]).await;
    let outcome = gateway(&url).call(&request(), &fast()).await.unwrap();
    assert_eq!(outcome.attempts, 1);
    assert_eq!(outcome.response.text, " entailment");
    assert_eq!(outcome.response.usage.prompt_tokens, 31);
    assert_eq!(outcome.response.token_logprobs.as_ref().unwrap().len(), 3);

    let seen = stub.seen.lock();
    let (auth, body) = &seen[0];
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(
        body,
        &json!({"model": "davinci", "prompt": "Text: a\nLabel:", "temperature": 0.0, "max_tokens": 8, "logprobs": 1})
    );
}

#[tokio::test]
async fn rate_limit_is_retried() {
    let limited =
        json!({"error": {"message": "Rate limit reached", "type": "requests", "code": "rate_limit_exceeded"}});
    let (url, stub) = stub(vec![(429, limited.clone()), (429, limited), (200, ok_payload())]).await;
    let outcome = gateway(&url).call(&request(), &fast()).await.unwrap();
    assert_eq!(outcome.attempts, 3);
    assert_eq!(stub.seen.lock().len(), 3);
}

#[tokio::test]
async fn auth_failure_is_fatal() {
    let denied = json!({"error": {"message": "Incorrect API key provided: sk-test.", "type": "invalid_request_error", "code": "invalid_api_key"}});
    let (url, stub) = stub(vec![(401, denied)]).await;
    let err = gateway(&url).call(&request(), &fast()).await.unwrap_err();
    assert_eq!(err.kind, ErrorKind::Auth);
    assert_eq!(err.attempt_count, 1);
    assert!(err.message.contains("Incorrect API key"));
    assert_eq!(stub.seen.lock().len(), 1);
}

#[tokio::test]
async fn context_overflow_is_not_retried() {
    let overflow = json!({"error": {"message": "This model's maximum context length is 2049 tokens", "type": "invalid_request_error", "code": "context_length_exceeded"}});
    let (url, _) = stub(vec![(400, overflow)]).await;
    let err = gateway(&url).call(&request(), &fast()).await.unwrap_err();
    assert_eq!(err.kind, ErrorKind::ContextLength);
    assert_eq!(err.attempt_count, 1);
}

#[tokio::test]
async fn unreachable_host_reports_connection() {
    let policy = RetryPolicy {
        max_attempts: 2,
        ..fast()
    };
    let err = gateway("http://127.0.0.1:9")
        .call(&request(), &policy)
        .await
        .unwrap_err();
    assert_eq!(err.kind, ErrorKind::Connection);
}
