use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Checker, CheckerError, CheckerVerdict, Label, Query, VerdictSource};

/// SHA-256 over (backend id, question, scene, action), each length-prefixed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(backend: &str, query: &Query<'_>) -> Self {
        let mut h = Sha256::new();
        for field in [backend, query.question, query.scene, query.text] {
            h.update((field.len() as u64).to_le_bytes());
            h.update(field.as_bytes());
        }
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn as_hex(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    key: String,
    label: Label,
    logprob: f64,
}

/// Append-only JSONL key→verdict store. Later lines win on duplicate keys.
pub struct CacheStore {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, (Label, f64)>>,
    writer: Mutex<Option<File>>,
}

impl CacheStore {
    pub fn in_memory() -> Self {
        CacheStore {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or creates) a store file. Unreadable or unwritable files degrade
    /// to an in-memory store with a warning.
    pub fn open(path: impl AsRef<Path>) -> Self {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if let Ok(file) = File::open(&path) {
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Record>(&line) {
                    Ok(r) => {
                        entries.insert(r.key, (r.label, r.logprob));
                    }
                    Err(e) => log::warn!("{}:{}: skipping cache record: {e}", path.display(), n + 1),
                }
            }
        }
        let writer = match OpenOptions::new().create(true).append(true).open(&path) {
            Ok(f) => Some(f),
            Err(e) => {
                log::warn!("cache {} not writable, continuing in memory: {e}", path.display());
                None
            }
        };
        CacheStore {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<(Label, f64)> {
        self.entries.read().unwrap().get(&key.0).copied()
    }

    pub fn put(&self, key: &CacheKey, label: Label, logprob: f64) {
        self.entries
            .write()
            .unwrap()
            .insert(key.0.clone(), (label, logprob));
        let mut writer = self.writer.lock().unwrap();
        if let Some(file) = writer.as_mut() {
            let line = serde_json::to_string(&Record {
                key: key.0.clone(),
                label,
                logprob,
            })
            .expect("records serialize");
            if let Err(e) = writeln!(file, "{line}") {
                log::warn!("cache write failed, continuing in memory: {e}");
                *writer = None;
            }
        }
    }
}

/// Answer-level memoization in front of another checker.
pub struct CachedChecker<C> {
    inner: C,
    store: Arc<CacheStore>,
}

impl<C: Checker> CachedChecker<C> {
    pub fn new(inner: C, store: Arc<CacheStore>) -> Self {
        CachedChecker { inner, store }
    }

    pub fn store(&self) -> &CacheStore {
        &self.store
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: Checker> Checker for CachedChecker<C> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn ask(&self, query: &Query<'_>) -> Result<CheckerVerdict, CheckerError> {
        if query.question.trim().is_empty() {
            return Err(CheckerError::EmptyQuestion);
        }
        let key = CacheKey::new(&self.inner.backend_id(), query);
        if let Some((label, lp)) = self.store.get(&key) {
            return Ok(CheckerVerdict::new(label, lp, VerdictSource::Cache));
        }
        let verdict = self.inner.ask(query)?;
        if !verdict.flagged {
            self.store.put(&key, verdict.label, verdict.true_logprob);
        }
        Ok(verdict)
    }
}
