//! Keyword, regex and metadata search over annotated records, then a CSV
//! export of the matches.

use annoweave::model::{AnnotationMetadata, ModelConfig};
use annoweave::prompt::default_template;
use annoweave::store::{
    write_csv, AnnotationItem, CmpOp, FilterExpr, MetadataCmp, NewRecord, SortDirection, SortSpec, Store,
};

fn main() {
    let store = Store::in_memory();
    let ids = store
        .import_records(
            [
                "The wage gap keeps growing",
                "Minimum wage hikes in 2023",
                "Rent control debate",
                "wages, rents and prices",
            ]
            .into_iter()
            .map(NewRecord::new)
            .collect(),
        )
        .unwrap()
        .ids;
    let schema = store
        .put_schema("topic", vec!["economy".into(), "housing".into()])
        .unwrap();
    let agent = store
        .register_agent(&ModelConfig::new("mock", "m"), &default_template(&schema))
        .unwrap()
        .agent;
    let subset = store.subset_from_ids(ids.clone()).unwrap();
    let job = store.create_job(agent.id, subset.id).unwrap();
    let items = ids
        .iter()
        .zip([
            ("economy", 0.93),
            ("economy", 0.61),
            ("housing", 0.88),
            ("economy", 0.42),
        ])
        .map(|(id, (label, conf))| AnnotationItem {
            record_id: *id,
            label: schema.label(label),
            metadata: vec![AnnotationMetadata::confidence(conf)],
        })
        .collect();
    store.persist_annotations(job.id, items).unwrap();

    let keyword = store.search(&FilterExpr::keyword("WAGE")).unwrap();
    println!("keyword 'WAGE': {:?}", keyword.record_ids);

    let regex = FilterExpr {
        regex: Some(r"\d{4}".into()),
        ..Default::default()
    };
    println!("regex \\d{{4}}: {:?}", store.query_records(&regex).unwrap());

    let unsure = FilterExpr {
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
    println!(
        "conf < 0.9, least confident first: {:?}",
        store.query_records(&unsure).unwrap()
    );

    let bad = FilterExpr {
        regex: Some("wage(".into()),
        ..Default::default()
    };
    println!("bad regex: {}", store.search(&bad).unwrap_err());

    println!();
    write_csv(&store.export(&unsure).unwrap(), std::io::stdout()).unwrap();
}
