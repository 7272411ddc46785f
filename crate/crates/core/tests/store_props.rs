//! Journal replay and write-path invariants of the store.

use annoweave::model::{AnnotationMetadata, AnnotationRef, ModelConfig, RecordId};
use annoweave::prompt::default_template;
use annoweave::store::{AnnotationItem, FilterExpr, NewRecord, ReviewStatus, Store};
use annoweave::verification::{verify, Decision, VerifyItem};
use proptest::prelude::*;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
enum Op {
    Import(Vec<String>),
    Schema(Vec<String>),
    Annotate { temperature: u8, conf: Vec<f64> },
    Verify { pick: usize, correct: bool, verifier: u8 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        prop::collection::vec("[a-z ]{0,12}", 1..5).prop_map(Op::Import),
        prop::collection::vec("[a-c]{1,2}", 1..4).prop_map(Op::Schema),
        (0u8..3, prop::collection::vec(0.0f64..1.0, 1..6))
            .prop_map(|(temperature, conf)| Op::Annotate { temperature, conf }),
        (any::<usize>(), any::<bool>(), 0u8..3).prop_map(|(pick, correct, verifier)| Op::Verify {
            pick,
            correct,
            verifier
        }),
    ]
}

/// Applies `op`, ignoring rejections; rejected writes must leave no trace.
fn apply(store: &Store, op: &Op) {
    match op {
        Op::Import(rows) => {
            let _ = store.import_records(rows.iter().map(NewRecord::new).collect());
        }
        Op::Schema(options) => {
            let _ = store.put_schema("s", options.clone());
        }
        Op::Annotate { temperature, conf } => {
            let (Some(schema), false) = (store.schema("s"), store.record_count() == 0) else {
                return;
            };
            let config = ModelConfig::new("mock", "m").with_param("temperature", *temperature as i64);
            let agent = store.register_agent(&config, &default_template(&schema)).unwrap().agent;
            let ids: Vec<RecordId> = store.records(0, usize::MAX).0.iter().map(|r| r.id).collect();
            let subset = store.subset_from_ids(ids.clone()).unwrap();
            let job = store.create_job(agent.id, subset.id).unwrap();
            let items = ids
                .iter()
                .zip(conf)
                .map(|(id, c)| AnnotationItem {
                    record_id: *id,
                    label: schema.label(&schema.options[id.0 as usize % schema.options.len()]),
                    metadata: vec![AnnotationMetadata::confidence(*c)],
                })
                .collect();
            store.persist_annotations(job.id, items).unwrap();
        }
        Op::Verify {
            pick,
            correct,
            verifier,
        } => {
            let all: Vec<_> = store
                .jobs()
                .iter()
                .flat_map(|j| store.annotations_for_job(j.id))
                .collect();
            if all.is_empty() {
                return;
            }
            let a = &all[pick % all.len()];
            let decision = match (correct, store.schema("s")) {
                (true, Some(s)) => Decision::Correct(
                    s.options
                        .iter()
                        .find(|o| **o != a.label.value)
                        .cloned()
                        .unwrap_or_default(),
                ),
                _ => Decision::Confirm,
            };
            let _ = verify(
                store,
                VerifyItem {
                    annotation_ref: AnnotationRef {
                        record_id: a.record_id,
                        agent_id: a.agent_id,
                        job_id: a.job_id,
                    },
                    verifier_id: format!("v{verifier}"),
                    decision,
                },
            );
        }
    }
}

/// Everything observable through the public read API.
fn snapshot(store: &Store) -> Value {
    let jobs = store.jobs();
    let annotations: Vec<_> = jobs.iter().flat_map(|j| store.annotations_for_job(j.id)).collect();
    json!({
        "records": store.records(0, usize::MAX).0,
        "schemas": store.schemas(),
        "templates": store.templates(),
        "agents": store.agents(),
        "jobs": jobs,
        "annotations": annotations,
        "verifications": store.verifications(None, None, None),
        "export": store.export(&FilterExpr::default()).unwrap(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reopening_replays_to_the_same_state(ops in prop::collection::vec(op(), 1..25)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let before = {
            let store = Store::open(&path).unwrap();
            for op in &ops {
                apply(&store, op);
            }
            snapshot(&store)
        };
        let reopened = Store::open(&path).unwrap();
        prop_assert_eq!(snapshot(&reopened), before);

        // ids keep counting from where the first session stopped
        let max = reopened.records(0, usize::MAX).0.iter().map(|r| r.id.0).max().unwrap_or(0);
        let fresh = reopened.import_records(vec![NewRecord::new("after reopen")]).unwrap();
        prop_assert_eq!(fresh.ids, vec![RecordId(max + 1)]);
    }

    #[test]
    fn schema_versions_only_grow(sets in prop::collection::vec(prop::collection::vec("[a-d]", 1..5), 1..12)) {
        let store = Store::in_memory();
        let mut last = 0;
        let mut previous: Option<Vec<String>> = None;
        for options in sets {
            let result = store.put_schema("s", options.clone());
            let current = store.schema("s").map_or(0, |s| s.version);
            match result {
                Ok(schema) => {
                    // resubmitting the current options is a no-op
                    let bump = if previous.as_ref() == Some(&options) { 0 } else { 1 };
                    prop_assert_eq!(schema.version, last + bump);
                    prop_assert_eq!(&schema.options, &options);
                    previous = Some(options);
                }
                Err(_) => prop_assert_eq!(current, last),
            }
            last = current;
            for v in 1..=last {
                prop_assert_eq!(store.schema_version("s", v).unwrap().version, v);
            }
        }
    }
}

#[test]
fn latest_decision_wins_across_verifiers() {
    let store = Store::in_memory();
    let ids = store.import_records(vec![NewRecord::new("one")]).unwrap().ids;
    let schema = store.put_schema("s", vec!["x".into(), "y".into()]).unwrap();
    let agent = store
        .register_agent(&ModelConfig::new("mock", "m"), &default_template(&schema))
        .unwrap()
        .agent;
    let subset = store.subset_from_ids(ids.clone()).unwrap();
    let job = store.create_job(agent.id, subset.id).unwrap();
    store
        .persist_annotations(
            job.id,
            vec![AnnotationItem {
                record_id: ids[0],
                label: schema.label("x"),
                metadata: vec![],
            }],
        )
        .unwrap();
    let r = AnnotationRef {
        record_id: ids[0],
        agent_id: agent.id,
        job_id: job.id,
    };
    let item = |who: &str, decision| VerifyItem {
        annotation_ref: r,
        verifier_id: who.into(),
        decision,
    };
    verify(&store, item("ana", Decision::Correct("y".into()))).unwrap();
    verify(&store, item("ben", Decision::Confirm)).unwrap();
    let rows = store.export(&FilterExpr::default()).unwrap();
    assert_eq!(rows[0].verification_status, ReviewStatus::Confirmed);
    assert_eq!(rows[0].final_label, "x");
    verify(&store, item("ana", Decision::Correct("y".into()))).unwrap();
    let rows = store.export(&FilterExpr::default()).unwrap();
    assert_eq!(rows[0].final_label, "y");
    // one row per verifier: ana's second decision replaced the first
    assert_eq!(store.verifications(None, Some(job.id), None).len(), 2);
}
