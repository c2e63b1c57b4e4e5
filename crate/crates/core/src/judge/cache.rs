use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use super::JudgeError;

pub(crate) type Slot = Arc<OnceLock<Result<String, JudgeError>>>;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    key: String,
    classifier_id: String,
    fingerprint: String,
    raw: String,
}

/// Reply cache keyed by request hash. Each key resolves at most once per
/// process; concurrent askers for the same key wait on the first.
/// With a directory, replies are appended to `verdicts.jsonl` and reloaded
/// on the next open.
pub struct VerdictCache {
    slots: Mutex<HashMap<String, Slot>>,
    stored: HashMap<String, String>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl VerdictCache {
    pub fn in_memory() -> Self {
        VerdictCache {
            slots: Mutex::new(HashMap::new()),
            stored: HashMap::new(),
            file: None,
            path: None,
        }
    }

    pub fn open(dir: &Path) -> Result<Self, JudgeError> {
        std::fs::create_dir_all(dir).map_err(|e| JudgeError::CacheIo(e.to_string()))?;
        let path = dir.join("verdicts.jsonl");
        let mut stored = HashMap::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| JudgeError::CacheIo(e.to_string()))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| JudgeError::CacheIo(e.to_string()))?;
                if line.is_empty() {
                    continue;
                }
                let entry: Entry = serde_json::from_str(&line).map_err(|e| {
                    JudgeError::CacheCorrupt(format!("{} line {}: {e}", path.display(), i + 1))
                })?;
                stored.insert(entry.key, entry.raw);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| JudgeError::CacheIo(e.to_string()))?;
        Ok(VerdictCache {
            slots: Mutex::new(HashMap::new()),
            stored,
            file: Some(Mutex::new(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub(crate) fn slot(&self, key: &str) -> Slot {
        let mut slots = self.slots.lock().unwrap();
        slots.entry(key.to_string()).or_default().clone()
    }

    pub(crate) fn stored(&self, key: &str) -> Option<String> {
        self.stored.get(key).cloned()
    }

    pub(crate) fn persist(
        &self,
        key: &str,
        classifier_id: &str,
        fingerprint: &str,
        raw: &str,
    ) -> Result<(), JudgeError> {
        let Some(file) = &self.file else {
            return Ok(());
        };
        let mut line = serde_json::to_string(&Entry {
            key: key.into(),
            classifier_id: classifier_id.into(),
            fingerprint: fingerprint.into(),
            raw: raw.into(),
        })
        .map_err(|e| JudgeError::CacheIo(e.to_string()))?;
        line.push('\n');
        // one write per entry keeps lines whole under concurrent writers
        let mut f = file.lock().unwrap();
        f.write_all(line.as_bytes())
            .map_err(|e| JudgeError::CacheIo(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{Judge, JudgeRequest, Predicate, RetryPolicy, Rule, ScriptedBackend};

    fn judge(dir: &Path) -> Judge {
        let backend = ScriptedBackend::new(vec![Rule::new("c", Predicate::Always, "yes")]);
        Judge::new(
            Arc::new(backend),
            VerdictCache::open(dir).unwrap(),
            RetryPolicy::default(),
            "v1",
        )
    }

    #[test]
    fn persisted_entries_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let req = JudgeRequest {
            classifier_id: "c",
            prompt: "p",
            unit_text: "t",
            fingerprint: "f",
        };
        let first = judge(dir.path());
        first.classify(&req).unwrap();
        assert_eq!(first.backend_calls(), 1);
        drop(first);
        let second = judge(dir.path());
        let v = second.classify(&req).unwrap();
        assert_eq!(v.raw, "yes");
        assert_eq!(second.backend_calls(), 0);
    }

    #[test]
    fn corrupt_cache_fails_fast() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("verdicts.jsonl"), "{not json\n").unwrap();
        assert!(matches!(
            VerdictCache::open(dir.path()),
            Err(JudgeError::CacheCorrupt(_))
        ));
    }

    #[test]
    fn concurrent_askers_trigger_one_backend_call() {
        let backend = ScriptedBackend::new(vec![Rule::new("c", Predicate::Always, "no")]);
        let j = Judge::new(
            Arc::new(backend),
            VerdictCache::in_memory(),
            RetryPolicy::default(),
            "",
        );
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    j.classify(&JudgeRequest {
                        classifier_id: "c",
                        prompt: "same",
                        unit_text: "t",
                        fingerprint: "f",
                    })
                    .unwrap()
                });
            }
        });
        assert_eq!(j.backend_calls(), 1);
    }
}
