//! Starts the HTTP API in-process with a mock model and drives a full
//! import, job, review and export cycle over HTTP.

use std::sync::Arc;
use std::time::Duration;

use annoweave::api::{router, AppState};
use annoweave::gateway::{Gateway, MockProvider, MockStep, SystemClock};
use annoweave::job::JobController;
use annoweave::store::Store;
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let store = Arc::new(Store::in_memory());
    let mock = MockProvider::always(MockStep::respond_with_logprobs("positive", &[("pos", -0.2)])).route(
        "refund",
        [MockStep::respond_with_logprobs("negative", &[("neg", -0.9)])],
    );
    let gateway = Gateway::new(Arc::new(SystemClock)).with_provider("mock", Arc::new(mock));
    let jobs = Arc::new(JobController::new(store, Arc::new(gateway))?);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    let app = router(AppState::new(jobs), None);
    tokio::spawn(async move { axum::serve(listener, app).await });

    let http = reqwest::Client::new();
    let post = |path: &str, body: Value| http.post(format!("{base}{path}")).json(&body).send();
    post(
        "/records",
        json!({"records": [{"content": "love it"}, {"content": "I want a refund"}]}),
    )
    .await?;
    http.put(format!("{base}/schema"))
        .json(&json!({"name": "sentiment", "options": ["positive", "negative"]}))
        .send()
        .await?;
    let agent: Value = post("/agents", json!({"config": {"provider": "mock", "model": "m"}}))
        .await?
        .json()
        .await?;
    let job: Value = post("/jobs", json!({"agent_id": agent["agent"]["id"], "record_ids": [1, 2]}))
        .await?
        .json()
        .await?;
    println!("accepted: {job}");

    let id = &job["job_id"];
    let view = loop {
        let v: Value = http.get(format!("{base}/jobs/{id}")).send().await?.json().await?;
        if v["state"] == "COMPLETED" || v["state"] == "FAILED" {
            break v;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    println!("labels: {}", view["summary"]["output"]["label_distribution"]);

    let queue: Value = http
        .get(format!("{base}/candidates?sort=conf"))
        .send()
        .await?
        .json()
        .await?;
    let first = &queue["items"][0];
    println!("least confident: {} ({})", first["content"], first["confidence"]);
    post(
        "/verifications",
        json!({"annotation_ref": first["annotation_ref"], "verifier_id": "demo", "decision": "confirm"}),
    )
    .await?;
    let csv = http
        .get(format!("{base}/export?format=csv"))
        .send()
        .await?
        .text()
        .await?;
    print!("{csv}");
    Ok(())
}
