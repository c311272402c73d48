use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::{AnnotationRecord, Provenance};
use super::PipelineError;
use crate::llmgate::cache::write_atomic;

/// One line of the released benchmark file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub scene_id: String,
    pub instance_id: i64,
    pub category: String,
    pub dense_referring_expression: String,
    pub scenario_questions: Vec<String>,
    pub best_frame_id: i64,
    pub context_frame_ids: Vec<i64>,
    pub provenance: Provenance,
}

impl ExportRecord {
    pub fn from_record(r: &AnnotationRecord) -> Option<ExportRecord> {
        if !r.is_final() {
            return None;
        }
        Some(ExportRecord {
            scene_id: r.scene_id.clone(),
            instance_id: r.instance_id,
            category: r.category.clone(),
            dense_referring_expression: r.dense_referring_expression.clone()?,
            scenario_questions: r.exported_questions().map(|q| q.text.clone()).collect(),
            best_frame_id: r.best_frame_id?,
            context_frame_ids: r.context_frame_ids.clone(),
            provenance: r.provenance.clone(),
        })
    }
}

/// Final records only, ordered by (scene_id, instance_id).
pub fn export_lines(records: &[AnnotationRecord]) -> Vec<ExportRecord> {
    let mut out: Vec<ExportRecord> = records.iter().filter_map(ExportRecord::from_record).collect();
    out.sort_by(|a, b| (&a.scene_id, a.instance_id).cmp(&(&b.scene_id, b.instance_id)));
    out
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut body = Vec::new();
    for it in items {
        serde_json::to_writer(&mut body, it).expect("serializes");
        body.push(b'\n');
    }
    body
}

fn store_err(path: &Path) -> impl FnOnce(crate::llmgate::LlmError) -> PipelineError + '_ {
    move |e| PipelineError::Store {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Writes the benchmark JSONL. Returns the number of lines.
pub fn write_export(path: &Path, records: &[AnnotationRecord]) -> Result<usize, PipelineError> {
    let lines = export_lines(records);
    write_atomic(path, &to_jsonl(&lines)).map_err(store_err(path))?;
    Ok(lines.len())
}

/// Full records of every status, ordered by (scene_id, instance_id).
pub fn write_records(path: &Path, records: &[AnnotationRecord]) -> Result<(), PipelineError> {
    let mut sorted: Vec<&AnnotationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.scene_id, a.instance_id).cmp(&(&b.scene_id, b.instance_id)));
    write_atomic(path, &to_jsonl(&sorted)).map_err(store_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>, PipelineError> {
    read_jsonl(path)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let f = std::fs::File::open(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Store {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut body = serde_json::to_vec_pretty(value).expect("serializes");
    body.write_all(b"\n").expect("vec write");
    write_atomic(path, &body).map_err(store_err(path))
}
