#![allow(dead_code)]

pub mod oracle;

use std::sync::Arc;

use annoweave::gateway::{FakeClock, Gateway, MockProvider, MockStep};
use annoweave::job::{JobController, JobOptions, JobSummary};
use annoweave::model::{Agent, ModelConfig, RecordId, Subset};
use annoweave::prompt::default_template;
use annoweave::store::{NewRecord, Store};

pub const NLI: [&str; 2] = ["entailment", "not entailment"];

/// Comment/opinion pairs in the style of the political-agreement use case.
pub const RECORDS: [&str; 10] = [
    "Comment: Raising the minimum wage lifts families out of poverty. Opinion: Minimum wage increases help low-income households.",
    "Comment: I drive to work every day. Opinion: Public transit funding should double.",
    "Comment: Our schools need more teachers, not more tests. Opinion: Standardized testing should be reduced.",
    "Comment: The weather was lovely this weekend. Opinion: Carbon taxes are the best climate policy.",
    "Comment: Tariffs protect local factories from unfair competition. Opinion: Trade barriers shield domestic manufacturing.",
    "Comment: My cat prefers the sunny window. Opinion: Housing should be treated as a human right.",
    "Comment: Healthcare costs keep rising faster than wages. Opinion: The border wall is a waste of money.",
    "Comment: Every citizen deserves a say at the ballot box. Opinion: Voting access should be expanded.",
    "Comment: I finished reading a novel last night. Opinion: Police budgets should be cut.",
    "Comment: Rents downtown are absurd now. Opinion: Nuclear power is too risky to expand.",
];

/// Raw responses for scenario A: records 1, 3, 5 and 8 normalize to
/// `entailment`, the others to `not entailment`.
pub const RESPONSES_A: [&str; 10] = [
    " Entailment.",
    " not entailment",
    "Label: entailment",
    "Not entailment.",
    "\"entailment\"",
    " NOT ENTAILMENT",
    "Answer: not entailment",
    " entailment",
    "not entailment!",
    "Output: Not Entailment",
];

/// Per-record log probabilities so every annotation carries a confidence.
pub fn logprobs_for(i: usize) -> Vec<(&'static str, f64)> {
    let base = -0.01 - 0.037 * i as f64;
    vec![(" tok", base), ("en", base / 2.0)]
}

pub struct Fixture {
    pub store: Arc<Store>,
    pub clock: Arc<FakeClock>,
    pub mock: Arc<MockProvider>,
    pub jobs: Arc<JobController>,
    pub agent: Agent,
    pub subset: Subset,
    pub record_ids: Vec<RecordId>,
}

/// Store with the ten records, the NLI schema, a mock agent with the default
/// template, and a subset of all records.
pub fn fixture(mock: MockProvider) -> Fixture {
    fixture_with(mock, 4)
}

pub fn fixture_with(mock: MockProvider, provider_cap: usize) -> Fixture {
    let store = Arc::new(Store::in_memory());
    let record_ids = store
        .import_records(RECORDS.iter().map(|r| NewRecord::new(*r)).collect())
        .unwrap()
        .ids;
    let schema = store
        .put_schema("nli", NLI.iter().map(|s| s.to_string()).collect())
        .unwrap();
    let agent = store
        .register_agent(
            &ModelConfig::new("mock", "davinci").with_param("temperature", 0i64),
            &default_template(&schema),
        )
        .unwrap()
        .agent;
    let subset = store.subset_from_ids(record_ids.clone()).unwrap();
    let clock = Arc::new(FakeClock::new());
    let mock = Arc::new(mock);
    let gateway = Gateway::new(clock.clone()).with_capped_provider("mock", mock.clone(), provider_cap);
    let jobs = Arc::new(JobController::new(store.clone(), Arc::new(gateway)).unwrap());
    Fixture {
        store,
        clock,
        mock,
        jobs,
        agent,
        subset,
        record_ids,
    }
}

/// Mock answering each record with the given response, routed by content.
pub fn routed_mock(responses: &[&str]) -> MockProvider {
    RECORDS
        .iter()
        .zip(responses)
        .enumerate()
        .fold(MockProvider::scripted([]), |mock, (i, (record, response))| {
            mock.route(*record, [MockStep::respond_with_logprobs(*response, &logprobs_for(i))])
        })
}

pub fn scenario_a() -> Fixture {
    fixture(routed_mock(&RESPONSES_A))
}

pub async fn run_all(f: &Fixture, parallelism: usize) -> JobSummary {
    f.jobs
        .run_job(
            f.agent.id,
            f.subset.id,
            JobOptions::default().with_parallelism(parallelism),
        )
        .await
        .unwrap()
}

/// Serves the API for `f` on an ephemeral port from a background thread and
/// returns its base URL.
pub fn spawn_server(f: &Fixture, token: Option<&str>, ui_dir: Option<std::path::PathBuf>) -> String {
    let state = annoweave::api::AppState::new(f.jobs.clone()).with_token(token.map(String::from));
    let router = annoweave::api::router(state, ui_dir);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}
