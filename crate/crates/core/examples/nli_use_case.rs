//! Labels comment/opinion pairs for entailment with a mock model and prints
//! the job summary.

use std::sync::Arc;

use annoweave::gateway::{FakeClock, Gateway, MockProvider, MockStep};
use annoweave::job::{JobController, JobOptions};
use annoweave::model::ModelConfig;
use annoweave::prompt::default_template;
use annoweave::store::{NewRecord, Store};

const PAIRS: [(&str, &str); 4] = [
    ("Comment: Raising the minimum wage lifts families out of poverty. Opinion: Wage increases help low-income households.", " Entailment."),
    ("Comment: I drive to work every day. Opinion: Public transit funding should double.", "not entailment"),
    ("Comment: Tariffs protect local factories. Opinion: Trade barriers shield manufacturing.", "Label: entailment"),
    ("Comment: My cat prefers the sunny window. Opinion: Housing is a human right.", "I cannot tell"),
];

#[tokio::main]
async fn main() {
    let store = Arc::new(Store::in_memory());
    let ids = store
        .import_records(PAIRS.iter().map(|(text, _)| NewRecord::new(*text)).collect())
        .unwrap()
        .ids;
    let schema = store
        .put_schema("nli", vec!["entailment".into(), "not entailment".into()])
        .unwrap();
    let agent = store
        .register_agent(
            &ModelConfig::new("mock", "davinci").with_param("temperature", 0i64),
            &default_template(&schema),
        )
        .unwrap()
        .agent;
    let subset = store.subset_from_ids(ids).unwrap();

    let mock = PAIRS.iter().fold(MockProvider::scripted([]), |m, (text, answer)| {
        m.route(
            *text,
            [MockStep::respond_with_logprobs(*answer, &[(" x", -0.1), ("y", -0.3)])],
        )
    });
    let gateway = Gateway::new(Arc::new(FakeClock::new())).with_provider("mock", Arc::new(mock));
    let jobs = JobController::new(store.clone(), Arc::new(gateway)).unwrap();

    let summary = jobs
        .run_job(agent.id, subset.id, JobOptions::default().with_parallelism(2))
        .await
        .unwrap();
    println!("{}", serde_json::to_string_pretty(&summary.without_timing()).unwrap());
    println!("conservation holds: {}", summary.conservation_holds());
}
