use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::LlmError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_hash: String,
    pub response_text: String,
    pub backend_model: String,
    pub attempts: u32,
}

/// Content-addressed response store kept as one JSONL file, sorted by
/// request hash and rewritten atomically on every insert.
#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    entries: Mutex<BTreeMap<String, CacheEntry>>,
}

impl ResponseCache {
    /// Opens `<dir>/<backend_id>.jsonl`, creating nothing until the first insert.
    pub fn open(dir: &Path, backend_id: &str) -> Result<ResponseCache, LlmError> {
        let path = dir.join(format!("{backend_id}.jsonl"));
        let mut entries = BTreeMap::new();
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let e: CacheEntry =
                        serde_json::from_str(line).map_err(|e| LlmError::CacheCorrupt {
                            path: path.clone(),
                            line: i + 1,
                            detail: e.to_string(),
                        })?;
                    entries.insert(e.request_hash.clone(), e);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(source) => return Err(LlmError::Io { path, source }),
        }
        Ok(ResponseCache {
            path,
            entries: Mutex::new(entries),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, request_hash: &str) -> Option<CacheEntry> {
        self.entries.lock().unwrap().get(request_hash).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, entry: CacheEntry) -> Result<(), LlmError> {
        let mut entries = self.entries.lock().unwrap();
        entries.insert(entry.request_hash.clone(), entry);
        let mut body = Vec::new();
        for e in entries.values() {
            serde_json::to_writer(&mut body, e).expect("cache entry serializes");
            body.push(b'\n');
        }
        write_atomic(&self.path, &body)
    }
}

/// Writes to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), LlmError> {
    let io = |source| LlmError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}
