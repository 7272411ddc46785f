//! Review loop: fetch the least confident candidates, confirm or correct
//! them, and see how the export resolves final labels.

use annoweave::model::{AnnotationMetadata, ModelConfig, VerificationStatus};
use annoweave::prompt::default_template;
use annoweave::store::{
    write_jsonl, AnnotationItem, CmpOp, FilterExpr, MetadataCmp, NewRecord, SortDirection, SortSpec, Store,
};
use annoweave::verification::{candidates, verifications_by, verify, verify_batch, Decision, Referent, VerifyItem};

fn main() {
    let store = Store::in_memory();
    let ids = store
        .import_records(
            ["great service", "never again", "it was fine", "meh"]
                .map(NewRecord::new)
                .to_vec(),
        )
        .unwrap()
        .ids;
    let schema = store
        .put_schema(
            "sentiment",
            vec!["positive".into(), "negative".into(), "neutral".into()],
        )
        .unwrap();
    let agent = store
        .register_agent(&ModelConfig::new("mock", "m"), &default_template(&schema))
        .unwrap()
        .agent;
    let subset = store.subset_from_ids(ids.clone()).unwrap();
    let job = store.create_job(agent.id, subset.id).unwrap();
    let labels = [
        ("positive", 0.97),
        ("negative", 0.91),
        ("positive", 0.55),
        ("negative", 0.48),
    ];
    let items = ids
        .iter()
        .zip(labels)
        .map(|(id, (label, conf))| AnnotationItem {
            record_id: *id,
            label: schema.label(label),
            metadata: vec![AnnotationMetadata::confidence(conf)],
        })
        .collect();
    store.persist_annotations(job.id, items).unwrap();

    let triage = FilterExpr {
        metadata_cmp: Some(MetadataCmp {
            name: "conf".into(),
            op: CmpOp::Lt,
            threshold: 0.9,
        }),
        sort: Some(SortSpec {
            key: "conf".into(),
            direction: SortDirection::Asc,
        }),
        ..Default::default()
    };
    let queue = candidates(&store, &triage).unwrap();
    for c in &queue {
        println!(
            "{} {:?} conf={:.2} {}",
            c.annotation_ref,
            c.label.value,
            c.confidence.unwrap(),
            c.content
        );
    }

    let item = |i: usize, decision| VerifyItem {
        annotation_ref: queue[i].annotation_ref,
        verifier_id: "reviewer".into(),
        decision,
    };
    verify(&store, item(0, Decision::Correct("neutral".into()))).unwrap();

    // the whole batch is rejected because of the unknown label
    let err = verify_batch(
        &store,
        vec![item(1, Decision::Confirm), item(1, Decision::Correct("mixed".into()))],
    )
    .unwrap_err();
    println!("\nbatch rejected: {err}");
    verify_batch(&store, vec![item(1, Decision::Correct("neutral".into()))]).unwrap();

    let corrected = verifications_by(&store, Referent::Agent(agent.id), Some(VerificationStatus::Corrected)).unwrap();
    println!("{} corrections by agent {}\n", corrected.len(), agent.id.0);
    write_jsonl(&store.export(&FilterExpr::default()).unwrap(), std::io::stdout()).unwrap();
}
