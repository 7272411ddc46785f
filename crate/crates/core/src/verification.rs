//! Human review of stored annotations.
//!
//! A verifier either confirms an annotation or corrects it to another option
//! of the current schema. Decisions are append-only; the latest decision of
//! a verifier replaces their earlier one and the latest decision overall
//! determines the annotation's status.

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_label, AgentId, AnnotationRef, JobId, Label, LabelError, RecordId, Verification, VerificationStatus,
};
use crate::store::{put_verifications, FilterExpr, ReviewStatus, Store, StoreError, Tables};

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error("annotation {0} not found")]
    NotFound(AnnotationRef),
    #[error("verifier id must not be empty")]
    EmptyVerifier,
    #[error("invalid correction: {0}")]
    InvalidLabel(#[from] LabelError),
    #[error("no-op correction: {0:?} is already the label")]
    NoOpCorrection(String),
    #[error("label {0:?} is no longer an option of the schema; correct it instead")]
    StaleConfirmation(String),
    #[error("batch item {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<VerificationError>,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// What the verifier decided.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "label", rename_all = "snake_case")]
pub enum Decision {
    Confirm,
    Correct(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyItem {
    pub annotation_ref: AnnotationRef,
    pub verifier_id: String,
    #[serde(flatten)]
    pub decision: Decision,
}

/// An annotation offered for review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub annotation_ref: AnnotationRef,
    pub record_id: RecordId,
    pub content: String,
    pub label: Label,
    pub confidence: Option<f64>,
    pub status: ReviewStatus,
    /// The label was produced under an older schema version.
    pub stale_schema: bool,
}

/// Annotations matching `filter` in its order. An empty filter lists all.
pub fn candidates(store: &Store, filter: &FilterExpr) -> Result<Vec<Candidate>, StoreError> {
    let rows = store.annotation_rows(filter)?;
    Ok(rows
        .into_iter()
        .map(|row| {
            let current = store.schema(&row.annotation.label.schema_name);
            Candidate {
                annotation_ref: row.annotation.reference(),
                record_id: row.record.id,
                content: row.record.content,
                confidence: row.annotation.confidence(),
                stale_schema: current.is_some_and(|s| s.version != row.annotation.label.schema_version),
                label: row.annotation.label,
                status: row.status,
            }
        })
        .collect())
}

fn decide(tables: &Tables, item: &VerifyItem) -> Result<Verification, VerificationError> {
    if item.verifier_id.trim().is_empty() {
        return Err(VerificationError::EmptyVerifier);
    }
    let annotation = tables
        .annotation(&item.annotation_ref)
        .ok_or(VerificationError::NotFound(item.annotation_ref))?;
    let schema = tables
        .schema(&annotation.label.schema_name)
        .ok_or_else(|| StoreError::not_found("schema", &annotation.label.schema_name))?;
    let (status, corrected_label) = match &item.decision {
        Decision::Confirm => {
            if !schema.contains(&annotation.label.value) {
                return Err(VerificationError::StaleConfirmation(annotation.label.value.clone()));
            }
            (VerificationStatus::Confirmed, None)
        }
        Decision::Correct(value) => {
            if *value == annotation.label.value {
                return Err(VerificationError::NoOpCorrection(value.clone()));
            }
            let label = schema.label(value.clone());
            validate_label(&label, schema)?;
            (VerificationStatus::Corrected, Some(label))
        }
    };
    Ok(Verification {
        annotation_ref: item.annotation_ref,
        verifier_id: item.verifier_id.clone(),
        status,
        corrected_label,
        created_at: Utc::now(),
    })
}

/// Records one decision atomically.
pub fn verify(store: &Store, item: VerifyItem) -> Result<Verification, VerificationError> {
    store.write(|t| {
        let v = decide(t, &item)?;
        Ok((vec![put_verifications(vec![v.clone()])], v))
    })
}

/// Records all decisions or none.
pub fn verify_batch(store: &Store, items: Vec<VerifyItem>) -> Result<Vec<Verification>, VerificationError> {
    if items.is_empty() {
        return Err(VerificationError::EmptyBatch);
    }
    store.write(|t| {
        let decided = items
            .iter()
            .enumerate()
            .map(|(index, item)| {
                decide(t, item).map_err(|e| VerificationError::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((vec![put_verifications(decided.clone())], decided))
    })
}

/// Whose verifications to list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Referent {
    Agent(AgentId),
    Job(JobId),
}

/// Verifications of one agent's or job's annotations, newest first.
pub fn verifications_by(
    store: &Store,
    referent: Referent,
    status: Option<VerificationStatus>,
) -> Result<Vec<Verification>, StoreError> {
    match referent {
        Referent::Agent(id) => {
            store.agent(id).ok_or_else(|| StoreError::not_found("agent", id))?;
            Ok(store.verifications(Some(id), None, status))
        }
        Referent::Job(id) => {
            store.job(id).ok_or_else(|| StoreError::not_found("job", id))?;
            Ok(store.verifications(None, Some(id), status))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::prompt::default_template;
    use crate::store::{AnnotationItem, NewRecord};

    fn annotated() -> (Store, AnnotationRef) {
        let store = Store::in_memory();
        let schema = store
            .put_schema("nli", vec!["entailment".into(), "not entailment".into()])
            .unwrap();
        let ids = store.import_records(vec![NewRecord::new("a b")]).unwrap().ids;
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
                    label: schema.label("entailment"),
                    metadata: vec![],
                }],
            )
            .unwrap();
        let r = AnnotationRef {
            record_id: ids[0],
            agent_id: agent.id,
            job_id: job.id,
        };
        (store, r)
    }

    fn item(r: &AnnotationRef, who: &str, decision: Decision) -> VerifyItem {
        VerifyItem {
            annotation_ref: *r,
            verifier_id: who.into(),
            decision,
        }
    }

    #[test]
    fn latest_decision_wins() {
        let (store, r) = annotated();
        verify(&store, item(&r, "ann", Decision::Confirm)).unwrap();
        verify(&store, item(&r, "ann", Decision::Correct("not entailment".into()))).unwrap();
        let rows = candidates(&store, &FilterExpr::default()).unwrap();
        assert_eq!(rows[0].status, ReviewStatus::Corrected);
        assert_eq!(store.verification_count(), 1);
    }

    #[test]
    fn rejects_noop_and_unknown_corrections() {
        let (store, r) = annotated();
        let e = verify(&store, item(&r, "ann", Decision::Correct("entailment".into()))).unwrap_err();
        assert!(e.to_string().contains("no-op correction"));
        let e = verify(&store, item(&r, "ann", Decision::Correct("contradiction".into()))).unwrap_err();
        assert!(matches!(
            e,
            VerificationError::InvalidLabel(LabelError::NotAnOption { .. })
        ));
        assert_eq!(store.verification_count(), 0);
    }

    #[test]
    fn batch_is_all_or_nothing() {
        let (store, r) = annotated();
        let mut missing = r;
        missing.job_id = JobId(99);
        let e = verify_batch(
            &store,
            vec![
                item(&r, "ann", Decision::Confirm),
                item(&missing, "ann", Decision::Confirm),
            ],
        )
        .unwrap_err();
        assert!(matches!(e, VerificationError::Batch { index: 1, .. }));
        assert_eq!(store.verification_count(), 0);
    }

    #[test]
    fn schema_bump_marks_candidates_stale() {
        let (store, r) = annotated();
        store
            .put_schema(
                "nli",
                vec!["entailment".into(), "neutral".into(), "contradiction".into()],
            )
            .unwrap();
        let rows = candidates(&store, &FilterExpr::default()).unwrap();
        assert!(rows[0].stale_schema);
        let v = verify(&store, item(&r, "ann", Decision::Correct("neutral".into()))).unwrap();
        assert_eq!(v.corrected_label.unwrap().schema_version, 2);
    }

    #[test]
    fn unknown_referent_is_not_found() {
        let (store, _) = annotated();
        assert!(verifications_by(&store, Referent::Job(JobId(42)), None).is_err());
    }
}
