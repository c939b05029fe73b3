//! Append-only, content-addressed cache of model exchanges and evaluations.
//!
//! Layout under the cache root:
//!
//! ```text
//! <root>/<bug_id>/log.jsonl   one JSON record per line, append-only
//! <root>/index.json           fingerprint -> bug_id, rebuilt on demand
//! ```
//!
//! Every record carries a SHA-256 of its payload. A mismatch, or a second
//! record with the same fingerprint but a different payload, is corruption.
//! A truncated final line (crash mid-write) is dropped with a warning.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;
const LOG_FILE: &str = "log.jsonl";
const INDEX_FILE: &str = "index.json";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("cache I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cache corruption: {0}")]
    Corruption(String),
    #[error("cannot serialize cache record: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CacheMode {
    /// Misses go to the provider / harness and are stored.
    Record,
    /// Misses are errors; nothing leaves the process.
    Replay,
    /// No storage at all.
    Passthrough,
}

impl std::str::FromStr for CacheMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "record" => Ok(CacheMode::Record),
            "replay" => Ok(CacheMode::Replay),
            "passthrough" => Ok(CacheMode::Passthrough),
            other => Err(format!("unknown cache mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordKind {
    LlmExchange,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub v: u32,
    pub bug_id: String,
    pub fingerprint: String,
    pub kind: RecordKind,
    pub payload: serde_json::Value,
    pub payload_sha256: String,
    pub created_at: u64,
    pub template_version: String,
}

impl CacheRecord {
    pub fn new(
        bug_id: &str,
        fingerprint: String,
        kind: RecordKind,
        payload: serde_json::Value,
        template_version: &str,
    ) -> Self {
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            v: SCHEMA_VERSION,
            bug_id: bug_id.to_string(),
            fingerprint,
            kind,
            payload_sha256: payload_digest(&payload),
            payload,
            created_at,
            template_version: template_version.to_string(),
        }
    }

    fn verify(&self) -> Result<(), StoreError> {
        if payload_digest(&self.payload) != self.payload_sha256 {
            return Err(StoreError::Corruption(format!(
                "payload hash mismatch for {} in {}",
                self.fingerprint, self.bug_id
            )));
        }
        Ok(())
    }
}

fn payload_digest(payload: &serde_json::Value) -> String {
    let text = serde_json::to_string(payload).expect("Value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// 128-bit hex fingerprint of length-prefixed parts.
pub fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug)]
struct BugLog {
    path: PathBuf,
    file: Option<File>,
    records: HashMap<String, CacheRecord>,
}

impl BugLog {
    fn load(path: PathBuf) -> Result<Self, StoreError> {
        let mut records = HashMap::new();
        if !path.exists() {
            return Ok(Self {
                path,
                file: None,
                records,
            });
        }
        let file = File::open(&path).map_err(io_err(&path))?;
        let mut reader = BufReader::new(file);
        let mut good_len = 0u64;
        let mut line = String::new();
        let mut lineno = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io_err(&path))?;
            if n == 0 {
                break;
            }
            lineno += 1;
            let complete = line.ends_with('\n');
            if line.trim().is_empty() {
                good_len += n as u64;
                continue;
            }
            match serde_json::from_str::<CacheRecord>(line.trim_end()) {
                Ok(record) => {
                    record.verify()?;
                    if let Some(prev) = records.get(&record.fingerprint) {
                        let prev: &CacheRecord = prev;
                        if prev.payload != record.payload {
                            return Err(StoreError::Corruption(format!(
                                "conflicting payloads for {} in {}",
                                record.fingerprint,
                                path.display()
                            )));
                        }
                    }
                    records.insert(record.fingerprint.clone(), record);
                    if complete {
                        good_len += n as u64;
                    }
                }
                Err(_) if !complete => {
                    log::warn!("ignoring truncated record at {}:{lineno}", path.display());
                    break;
                }
                Err(e) => {
                    return Err(StoreError::Corruption(format!(
                        "{}:{lineno}: {e}",
                        path.display()
                    )))
                }
            }
        }
        let actual = std::fs::metadata(&path).map_err(io_err(&path))?.len();
        if actual > good_len {
            // drop the partial tail so later appends start on a fresh line
            let f = OpenOptions::new()
                .write(true)
                .open(&path)
                .map_err(io_err(&path))?;
            f.set_len(good_len).map_err(io_err(&path))?;
        }
        Ok(Self {
            path,
            file: None,
            records,
        })
    }

    fn append(&mut self, record: &CacheRecord) -> Result<(), StoreError> {
        if self.file.is_none() {
            if let Some(parent) = self.path.parent() {
                std::fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(io_err(&self.path))?;
            f.seek(std::io::SeekFrom::End(0))
                .map_err(io_err(&self.path))?;
            self.file = Some(f);
        }
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let f = self.file.as_mut().expect("opened above");
        f.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        f.sync_data().map_err(io_err(&self.path))?;
        Ok(())
    }
}

/// Handle on a cache directory. Cheap to share across threads.
#[derive(Debug)]
pub struct Store {
    root: Option<PathBuf>,
    mode: CacheMode,
    logs: Mutex<HashMap<String, Arc<Mutex<BugLog>>>>,
    index: Mutex<Option<BTreeMap<String, String>>>,
}

fn bug_dir_name(bug_id: &str) -> String {
    bug_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl Store {
    pub fn open(root: impl Into<PathBuf>, mode: CacheMode) -> Result<Self, StoreError> {
        let root = root.into();
        if mode == CacheMode::Record {
            std::fs::create_dir_all(&root).map_err(io_err(&root))?;
        }
        Ok(Self {
            root: (mode != CacheMode::Passthrough).then_some(root),
            mode,
            logs: Mutex::new(HashMap::new()),
            index: Mutex::new(None),
        })
    }

    /// A store that never touches the disk.
    pub fn passthrough() -> Self {
        Self {
            root: None,
            mode: CacheMode::Passthrough,
            logs: Mutex::new(HashMap::new()),
            index: Mutex::new(None),
        }
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn log_for(&self, bug_id: &str) -> Result<Option<Arc<Mutex<BugLog>>>, StoreError> {
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let mut logs = self.logs.lock().expect("store logs");
        if let Some(log) = logs.get(bug_id) {
            return Ok(Some(log.clone()));
        }
        let path = root.join(bug_dir_name(bug_id)).join(LOG_FILE);
        let log = Arc::new(Mutex::new(BugLog::load(path)?));
        logs.insert(bug_id.to_string(), log.clone());
        Ok(Some(log))
    }

    /// Stores `record`. Durable on return; re-putting an identical payload
    /// is a no-op.
    pub fn put(&self, record: CacheRecord) -> Result<(), StoreError> {
        let Some(log) = self.log_for(&record.bug_id)? else {
            return Ok(());
        };
        let mut log = log.lock().expect("bug log");
        if let Some(existing) = log.records.get(&record.fingerprint) {
            if existing.payload == record.payload {
                return Ok(());
            }
            return Err(StoreError::Corruption(format!(
                "fingerprint {} already holds a different payload",
                record.fingerprint
            )));
        }
        log.append(&record)?;
        if let Some(index) = self.index.lock().expect("index").as_mut() {
            index.insert(record.fingerprint.clone(), record.bug_id.clone());
        }
        log.records.insert(record.fingerprint.clone(), record);
        Ok(())
    }

    /// Looks a fingerprint up within one bug's log.
    pub fn get_in(
        &self,
        bug_id: &str,
        fingerprint: &str,
    ) -> Result<Option<CacheRecord>, StoreError> {
        let Some(log) = self.log_for(bug_id)? else {
            return Ok(None);
        };
        let log = log.lock().expect("bug log");
        Ok(log.records.get(fingerprint).cloned())
    }

    /// Looks a fingerprint up across all bugs via the index.
    pub fn get(&self, fingerprint: &str) -> Result<Option<CacheRecord>, StoreError> {
        if self.root.is_none() {
            return Ok(None);
        }
        let bug = {
            let mut index = self.index.lock().expect("index");
            if index.is_none() {
                *index = Some(self.load_index()?);
            }
            index.as_ref().and_then(|i| i.get(fingerprint).cloned())
        };
        let bug = match bug {
            Some(b) => Some(b),
            None => {
                // index may be stale: rebuild from the logs
                let rebuilt = self.rebuild_index()?;
                let found = rebuilt.get(fingerprint).cloned();
                *self.index.lock().expect("index") = Some(rebuilt);
                found
            }
        };
        match bug {
            Some(bug_id) => self.get_in(&bug_id, fingerprint),
            None => Ok(None),
        }
    }

    fn load_index(&self) -> Result<BTreeMap<String, String>, StoreError> {
        let root = self.root.as_ref().expect("checked by caller");
        let path = root.join(INDEX_FILE);
        if !path.exists() {
            return self.rebuild_index();
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        match serde_json::from_str(&text) {
            Ok(index) => Ok(index),
            Err(e) => {
                log::warn!("rebuilding unreadable cache index {}: {e}", path.display());
                self.rebuild_index()
            }
        }
    }

    fn rebuild_index(&self) -> Result<BTreeMap<String, String>, StoreError> {
        let root = self.root.as_ref().expect("checked by caller");
        let mut index = BTreeMap::new();
        let Ok(entries) = std::fs::read_dir(root) else {
            return Ok(index);
        };
        for entry in entries {
            let entry = entry.map_err(io_err(root))?;
            if !entry.path().join(LOG_FILE).is_file() {
                continue;
            }
            let log = BugLog::load(entry.path().join(LOG_FILE))?;
            for (fp, rec) in log.records {
                index.insert(fp, rec.bug_id);
            }
        }
        Ok(index)
    }

    /// Writes `index.json`. A no-op outside record mode.
    pub fn flush(&self) -> Result<(), StoreError> {
        if self.mode != CacheMode::Record {
            return Ok(());
        }
        let root = self.root.as_ref().expect("record mode has a root");
        let index = self.rebuild_index()?;
        let tmp = root.join(format!("{INDEX_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&index)?).map_err(io_err(&tmp))?;
        let dest = root.join(INDEX_FILE);
        std::fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
        *self.index.lock().expect("index") = Some(index);
        Ok(())
    }
}
