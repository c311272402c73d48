//! Per-scene job store: `<root>/<scene_id>/journal.jsonl` holds one record
//! snapshot per persisted stage, `snapshot.json` the compacted state and
//! `timing.log` wall-clock stage timings kept out of the canonical output.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use super::record::AnnotationRecord;
use super::PipelineError;
use crate::llmgate::cache::write_atomic;

pub struct SceneStore {
    dir: PathBuf,
    scene_id: String,
    inner: Mutex<Inner>,
}

struct Inner {
    records: BTreeMap<i64, AnnotationRecord>,
    journal: File,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl SceneStore {
    /// Loads the snapshot and replays the journal over it. A truncated final
    /// journal line (interrupted write) is ignored.
    pub fn open(root: &Path, scene_id: &str) -> Result<SceneStore, PipelineError> {
        let dir = root.join(scene_id);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut records = BTreeMap::new();
        let snap = dir.join("snapshot.json");
        if snap.exists() {
            let text = std::fs::read_to_string(&snap).map_err(io_err(&snap))?;
            let list: Vec<AnnotationRecord> =
                serde_json::from_str(&text).map_err(|e| PipelineError::Store {
                    path: snap.clone(),
                    detail: e.to_string(),
                })?;
            for r in list {
                records.insert(r.instance_id, r);
            }
        }
        let journal_path = dir.join("journal.jsonl");
        let mut valid_len = 0u64;
        if journal_path.exists() {
            let text = std::fs::read_to_string(&journal_path).map_err(io_err(&journal_path))?;
            let mut offset = 0usize;
            for line in text.split_inclusive('\n') {
                if !line.ends_with('\n') {
                    break;
                }
                let r: AnnotationRecord =
                    serde_json::from_str(line.trim_end()).map_err(|e| PipelineError::Store {
                        path: journal_path.clone(),
                        detail: format!("byte {offset}: {e}"),
                    })?;
                records.insert(r.instance_id, r);
                offset += line.len();
            }
            valid_len = offset as u64;
        }
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)
            .map_err(io_err(&journal_path))?;
        journal.set_len(valid_len).map_err(io_err(&journal_path))?;
        Ok(SceneStore {
            dir,
            scene_id: scene_id.to_string(),
            inner: Mutex::new(Inner { records, journal }),
        })
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get(&self, instance_id: i64) -> Option<AnnotationRecord> {
        self.inner.lock().unwrap().records.get(&instance_id).cloned()
    }

    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.inner.lock().unwrap().records.values().cloned().collect()
    }

    /// Appends the record to the journal and syncs before returning.
    pub fn persist(&self, record: &AnnotationRecord) -> Result<(), PipelineError> {
        let mut line = serde_json::to_vec(record).expect("record serializes");
        line.push(b'\n');
        let path = self.dir.join("journal.jsonl");
        let mut inner = self.inner.lock().unwrap();
        inner.journal.write_all(&line).map_err(io_err(&path))?;
        inner.journal.sync_data().map_err(io_err(&path))?;
        inner.records.insert(record.instance_id, record.clone());
        Ok(())
    }

    /// Rewrites the snapshot atomically, then empties the journal.
    pub fn compact(&self) -> Result<(), PipelineError> {
        let inner = self.inner.lock().unwrap();
        let list: Vec<&AnnotationRecord> = inner.records.values().collect();
        let mut body = serde_json::to_vec_pretty(&list).expect("records serialize");
        body.push(b'\n');
        let snap = self.dir.join("snapshot.json");
        write_atomic(&snap, &body).map_err(|e| PipelineError::Store {
            path: snap.clone(),
            detail: e.to_string(),
        })?;
        let journal_path = self.dir.join("journal.jsonl");
        inner.journal.set_len(0).map_err(io_err(&journal_path))?;
        inner.journal.sync_all().map_err(io_err(&journal_path))
    }

    pub fn log_timing(&self, instance_id: i64, stage: &str, elapsed: Duration) {
        let path = self.dir.join("timing.log");
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_millis();
        let line = format!("{stamp}\t{}\t{instance_id}\t{stage}\t{}\n", self.scene_id, elapsed.as_millis());
        let res = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()));
        if let Err(e) = res {
            log::warn!("timing log {}: {e}", path.display());
        }
    }
}

/// Scene stores under one root directory.
pub struct JobStore {
    root: PathBuf,
}

impl JobStore {
    pub fn new(root: impl Into<PathBuf>) -> JobStore {
        JobStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn scene(&self, scene_id: &str) -> Result<SceneStore, PipelineError> {
        SceneStore::open(&self.root, scene_id)
    }

    pub fn scene_ids(&self) -> Result<Vec<String>, PipelineError> {
        let mut ids = Vec::new();
        let entries = match std::fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ids),
            Err(e) => return Err(io_err(&self.root)(e)),
        };
        for e in entries {
            let e = e.map_err(io_err(&self.root))?;
            if e.path().is_dir() {
                ids.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Every record of every scene, ordered by (scene_id, instance_id).
    pub fn all_records(&self) -> Result<Vec<AnnotationRecord>, PipelineError> {
        let mut out = Vec::new();
        for id in self.scene_ids()? {
            out.extend(self.scene(&id)?.records());
        }
        Ok(out)
    }
}
