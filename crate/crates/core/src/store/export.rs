use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{AnnotationRow, ReviewStatus};
use crate::model::{AgentId, JobId, RecordId};

/// One exported annotation with its resolved final label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub record_id: RecordId,
    pub content: String,
    pub llm_label: String,
    pub agent_id: AgentId,
    pub job_id: JobId,
    pub confidence: Option<f64>,
    pub verification_status: ReviewStatus,
    /// The corrected label when the latest decision is a correction,
    /// otherwise the LLM label.
    pub final_label: String,
}

impl ExportRow {
    pub(crate) fn from_row(row: AnnotationRow) -> Self {
        let llm_label = row.annotation.label.value.clone();
        let final_label = match (&row.status, &row.verification) {
            (ReviewStatus::Corrected, Some(v)) => v
                .corrected_label
                .as_ref()
                .map(|l| l.value.clone())
                .unwrap_or_else(|| llm_label.clone()),
            _ => llm_label.clone(),
        };
        ExportRow {
            record_id: row.record.id,
            confidence: row.annotation.confidence(),
            content: row.record.content,
            llm_label,
            agent_id: row.annotation.agent_id,
            job_id: row.annotation.job_id,
            verification_status: row.status,
            final_label,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(rows: &[ExportRow], mut out: W) -> std::io::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Writes CSV with a header row named after the [`ExportRow`] fields.
/// A missing confidence is an empty cell.
pub fn write_csv<W: Write>(rows: &[ExportRow], out: W) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record([
        "record_id",
        "content",
        "llm_label",
        "agent_id",
        "job_id",
        "confidence",
        "verification_status",
        "final_label",
    ])?;
    for row in rows {
        let status = match row.verification_status {
            ReviewStatus::Unverified => "UNVERIFIED",
            ReviewStatus::Confirmed => "CONFIRMED",
            ReviewStatus::Corrected => "CORRECTED",
        };
        writer.write_record([
            row.record_id.to_string(),
            row.content.clone(),
            row.llm_label.clone(),
            row.agent_id.to_string(),
            row.job_id.to_string(),
            row.confidence.map(|c| c.to_string()).unwrap_or_default(),
            status.to_string(),
            row.final_label.clone(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(confidence: Option<f64>) -> ExportRow {
        ExportRow {
            record_id: RecordId(1),
            content: "He said \"hi\", then left.".into(),
            llm_label: "entailment".into(),
            agent_id: AgentId(2),
            job_id: JobId(3),
            confidence,
            verification_status: ReviewStatus::Corrected,
            final_label: "neutral".into(),
        }
    }

    #[test]
    fn jsonl_has_one_object_per_line() {
        let mut buf = Vec::new();
        write_jsonl(&[row(Some(0.5)), row(None)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: ExportRow = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(back, row(Some(0.5)));
        assert!(lines[1].contains("\"confidence\":null"));
        assert!(lines[1].contains("\"verification_status\":\"CORRECTED\""));
    }

    #[test]
    fn csv_header_and_quoting() {
        let mut buf = Vec::new();
        write_csv(&[row(None)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "record_id,content,llm_label,agent_id,job_id,confidence,verification_status,final_label"
        );
        assert_eq!(
            lines.next().unwrap(),
            "1,\"He said \"\"hi\"\", then left.\",entailment,2,3,,CORRECTED,neutral"
        );
    }
}
