//! Retries against a scripted provider on a fake clock, so the backoff
//! schedule prints instantly.

use std::sync::Arc;

use annoweave::gateway::{ErrorKind, FakeClock, Gateway, MockProvider, MockStep, ProviderRequest, RetryPolicy};
use annoweave::model::ModelConfig;

#[tokio::main]
async fn main() {
    let clock = Arc::new(FakeClock::new());
    let mock = MockProvider::scripted([
        MockStep::fail(ErrorKind::RateLimit),
        MockStep::fail(ErrorKind::Overloaded),
        MockStep::respond("entailment"),
        MockStep::fail(ErrorKind::Auth),
    ]);
    let gateway = Gateway::new(clock.clone()).with_provider("mock", Arc::new(mock));
    let policy = RetryPolicy::default().without_jitter();
    let request = ProviderRequest {
        prompt: "Text: x\nLabel:".into(),
        config: ModelConfig::new("mock", "davinci"),
        request_logprobs: false,
    };

    let ok = gateway.call(&request, &policy).await.unwrap();
    println!(
        "answered {:?} after {} attempts, slept {:?}",
        ok.response.text,
        ok.attempts,
        clock.sleeps()
    );

    let err = gateway.call(&request, &policy).await.unwrap_err();
    println!(
        "gave up: {} ({:?}) after {} attempt",
        err.message, err.kind, err.attempt_count
    );
}
