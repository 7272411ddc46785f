//! Brute-force reference for record search, written without the store's
//! filter code, plus a seeded synthetic corpus to run it against.

use std::cmp::Ordering;
use std::collections::HashMap;

use annoweave::model::{AgentId, Annotation, AnnotationMetadata, AnnotationRef, JobId, ModelConfig, Record, RecordId};
use annoweave::prompt::default_template;
use annoweave::store::{
    AnnotationItem, CmpOp, FilterExpr, LabelEq, MetadataCmp, NewRecord, ReviewStatus, SortDirection, SortSpec, Store,
    VerifiedFilter, CREATED_AT,
};
use annoweave::verification::{verify, Decision, VerifyItem};
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use regex::Regex;

const WORDS: [&str; 16] = [
    "apple", "Banana", "cherry", "delta", "Echo", "foxtrot", "gamma", "hotel", "India", "juliet", "kilo", "lima",
    "mango", "November", "oscar", "papa",
];

const REGEXES: [&str; 10] = [
    "^apple",
    "o\\b",
    "[0-9]{3}",
    "(?i)delta",
    "ch.*ry",
    "Banana|mango",
    "^[A-Z]",
    "a{2,}",
    "\\d$",
    "kilo lima",
];

pub const OPTIONS: [&str; 3] = ["positive", "negative", "neutral"];

/// Data the oracle sees: exactly what the test wrote.
#[derive(Debug, Default)]
pub struct World {
    pub records: Vec<Record>,
    pub annotations: Vec<Annotation>,
    pub status: HashMap<(RecordId, JobId), ReviewStatus>,
    pub agents: Vec<AgentId>,
    pub jobs: Vec<JobId>,
}

impl World {
    fn status_of(&self, a: &Annotation) -> ReviewStatus {
        self.status
            .get(&(a.record_id, a.job_id))
            .copied()
            .unwrap_or(ReviewStatus::Unverified)
    }
}

/// Imports `n` records, annotates them with three jobs and applies random
/// verifications. Metadata values are coarse so sort ties are common.
pub fn synthetic_world(n: usize, seed: u64) -> (Store, World) {
    let mut rng = StdRng::seed_from_u64(seed);
    let store = Store::in_memory();
    let rows: Vec<NewRecord> = (0..n)
        .map(|i| {
            let len = rng.random_range(3..=8);
            let words: Vec<&str> = (0..len).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
            NewRecord::new(format!("{} {}", words.join(" "), i))
        })
        .collect();
    let ids = store.import_records(rows).unwrap().ids;
    let schema = store
        .put_schema("sentiment", OPTIONS.iter().map(|s| s.to_string()).collect())
        .unwrap();
    let template = default_template(&schema);
    let mut world = World {
        records: store.records_by_ids(&ids).unwrap(),
        ..Default::default()
    };
    let subset = store.subset_from_ids(ids.clone()).unwrap();
    for t in 0..3 {
        let config = ModelConfig::new("mock", "m").with_param("temperature", t as f64 * 0.5);
        let agent = store.register_agent(&config, &template).unwrap().agent;
        let job = store.create_job(agent.id, subset.id).unwrap();
        world.agents.push(agent.id);
        world.jobs.push(job.id);
        let mut items = Vec::new();
        for id in &ids {
            if !rng.random_bool(0.6) {
                continue;
            }
            let mut metadata = Vec::new();
            if rng.random_bool(0.8) {
                metadata.push(AnnotationMetadata::confidence(rng.random_range(0..=20) as f64 / 20.0));
            }
            if rng.random_bool(0.5) {
                metadata.push(AnnotationMetadata {
                    name: "score".into(),
                    value: rng.random_range(0..10) as f64,
                });
            }
            items.push(AnnotationItem {
                record_id: *id,
                label: schema.label(*OPTIONS.choose(&mut rng).unwrap()),
                metadata,
            });
        }
        let report = store.persist_annotations(job.id, items).unwrap();
        assert!(report.rejected.is_empty());
        world.annotations.extend(store.annotations_for_job(job.id));
    }
    for a in world.annotations.clone() {
        if !rng.random_bool(0.3) {
            continue;
        }
        let decision = if rng.random_bool(0.5) {
            Decision::Confirm
        } else {
            let other = OPTIONS.iter().find(|o| **o != a.label.value).unwrap();
            Decision::Correct(other.to_string())
        };
        let status = match decision {
            Decision::Confirm => ReviewStatus::Confirmed,
            Decision::Correct(_) => ReviewStatus::Corrected,
        };
        verify(
            &store,
            VerifyItem {
                annotation_ref: AnnotationRef {
                    record_id: a.record_id,
                    agent_id: a.agent_id,
                    job_id: a.job_id,
                },
                verifier_id: "v".into(),
                decision,
            },
        )
        .unwrap();
        world.status.insert((a.record_id, a.job_id), status);
    }
    (store, world)
}

/// A random filter over the synthetic corpus. May be empty.
pub fn random_filter(rng: &mut StdRng, world: &World) -> FilterExpr {
    let mut f = FilterExpr::default();
    if rng.random_bool(0.35) {
        let w = WORDS.choose(rng).unwrap();
        let start = rng.random_range(0..w.len() - 2);
        let piece = &w[start..rng.random_range(start + 2..=w.len())];
        f.keyword = Some(if rng.random_bool(0.5) {
            piece.to_uppercase()
        } else {
            piece.to_string()
        });
    }
    if rng.random_bool(0.25) {
        f.regex = Some(REGEXES.choose(rng).unwrap().to_string());
    }
    if rng.random_bool(0.3) {
        let value = if rng.random_bool(0.9) {
            OPTIONS.choose(rng).unwrap()
        } else {
            "absent"
        };
        f.label_eq = Some(LabelEq {
            schema_name: "sentiment".into(),
            value: value.to_string(),
        });
    }
    if rng.random_bool(0.3) {
        let name = ["conf", "score", "missing"][rng.random_range(0..3)];
        let op = [CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Eq][rng.random_range(0..5)];
        let threshold = if name == "score" {
            rng.random_range(0..10) as f64
        } else {
            rng.random_range(0..=20) as f64 / 20.0
        };
        f.metadata_cmp = Some(MetadataCmp {
            name: name.into(),
            op,
            threshold,
        });
    }
    if rng.random_bool(0.25) {
        f.verified = Some(
            [
                VerifiedFilter::Any,
                VerifiedFilter::Unverified,
                VerifiedFilter::Confirmed,
                VerifiedFilter::Corrected,
            ][rng.random_range(0..4)],
        );
    }
    if rng.random_bool(0.2) {
        f.agent_id = Some(if rng.random_bool(0.9) {
            *world.agents.choose(rng).unwrap()
        } else {
            AgentId(99)
        });
    }
    if rng.random_bool(0.2) {
        f.job_id = Some(*world.jobs.choose(rng).unwrap());
    }
    if rng.random_bool(0.5) {
        let key = ["conf", "score", CREATED_AT, "missing"][rng.random_range(0..4)];
        f.sort = Some(SortSpec {
            key: key.into(),
            direction: if rng.random_bool(0.5) {
                SortDirection::Asc
            } else {
                SortDirection::Desc
            },
        });
    }
    if rng.random_bool(0.3) {
        f.limit = Some(rng.random_range(1..60));
    }
    f
}

fn holds(op: CmpOp, v: f64, t: f64) -> bool {
    match op {
        CmpOp::Lt => v < t,
        CmpOp::Le => v <= t,
        CmpOp::Gt => v > t,
        CmpOp::Ge => v >= t,
        CmpOp::Eq => v == t,
    }
}

fn meta(a: &Annotation, name: &str) -> Option<f64> {
    a.metadata.iter().find(|m| m.name == name).map(|m| m.value)
}

/// Record ids matching `f`, in result order.
pub fn search_oracle(world: &World, f: &FilterExpr) -> Vec<RecordId> {
    let verified = f.verified.filter(|v| *v != VerifiedFilter::Any);
    let annotation_clauses = f.label_eq.is_some()
        || f.metadata_cmp.is_some()
        || verified.is_some()
        || f.agent_id.is_some()
        || f.job_id.is_some();
    let regex = f.regex.as_deref().map(|p| Regex::new(p).unwrap());
    let mut hits: Vec<(RecordId, Option<f64>)> = Vec::new();
    for r in &world.records {
        if let Some(k) = &f.keyword {
            if !r.content.to_ascii_lowercase().contains(&k.to_ascii_lowercase()) {
                continue;
            }
        }
        if let Some(re) = &regex {
            if !re.is_match(&r.content) {
                continue;
            }
        }
        let matching: Vec<&Annotation> = world
            .annotations
            .iter()
            .filter(|a| a.record_id == r.id)
            .filter(|a| {
                f.label_eq
                    .as_ref()
                    .is_none_or(|l| a.label.schema_name == l.schema_name && a.label.value == l.value)
                    && f.metadata_cmp
                        .as_ref()
                        .is_none_or(|m| meta(a, &m.name).is_some_and(|v| holds(m.op, v, m.threshold)))
                    && verified.is_none_or(|v| {
                        let s = world.status_of(a);
                        match v {
                            VerifiedFilter::Unverified => s == ReviewStatus::Unverified,
                            VerifiedFilter::Confirmed => s == ReviewStatus::Confirmed,
                            VerifiedFilter::Corrected => s == ReviewStatus::Corrected,
                            VerifiedFilter::Any => true,
                        }
                    })
                    && f.agent_id.is_none_or(|id| a.agent_id == id)
                    && f.job_id.is_none_or(|id| a.job_id == id)
            })
            .collect();
        if annotation_clauses && matching.is_empty() {
            continue;
        }
        let key = match &f.sort {
            None => None,
            // one import batch: every record shares its timestamp
            Some(s) if s.key == CREATED_AT => Some(0.0),
            Some(s) => {
                let values = matching.iter().filter_map(|a| meta(a, &s.key));
                match s.direction {
                    SortDirection::Asc => values.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v)))),
                    SortDirection::Desc => values.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
                }
            }
        };
        hits.push((r.id, key));
    }
    let desc = f.sort.as_ref().is_some_and(|s| s.direction == SortDirection::Desc);
    hits.sort_by(|(ia, ka), (ib, kb)| {
        let by_key = match (ka, kb) {
            (Some(a), Some(b)) => {
                let o = a.partial_cmp(b).unwrap();
                if desc {
                    o.reverse()
                } else {
                    o
                }
            }
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        };
        by_key.then(ia.cmp(ib))
    });
    let mut ids: Vec<RecordId> = hits.into_iter().map(|(id, _)| id).collect();
    if let Some(limit) = f.limit {
        ids.truncate(limit);
    }
    ids
}

pub fn seeded(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}
