//! Response cache keyed on model, prompt and instance.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::PromptBundle;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    response: String,
}

struct Inner {
    map: HashMap<String, String>,
    file: Option<File>,
}

/// In-memory map optionally mirrored to an append-only JSONL file.
pub struct ResponseCache {
    inner: Mutex<Inner>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            inner: Mutex::new(Inner {
                map: HashMap::new(),
                file: None,
            }),
            path: None,
        }
    }

    /// Opens or creates the cache file. Lines that fail to parse (a torn last
    /// write) are skipped.
    pub fn open(path: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if let Ok(e) = serde_json::from_str::<Entry>(&line) {
                    map.insert(e.key, e.response);
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        // Terminate a torn last line so new entries start cleanly.
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.last().is_some_and(|b| *b != b'\n') {
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(ResponseCache {
            inner: Mutex::new(Inner { map, file: Some(file) }),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn key(model_tag: &str, prompt: &PromptBundle, instance_id: &str) -> String {
        let mut h = Sha256::new();
        for part in [model_tag, &prompt.system_text, &prompt.human_text, instance_id] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.lock().map.get(key).cloned()
    }

    /// Stores a response. A failed file write is logged; the in-memory entry stays.
    pub fn put(&self, key: &str, response: &str) {
        let mut inner = self.lock();
        if inner.map.insert(key.to_string(), response.to_string()).is_some() {
            return;
        }
        if let Some(f) = inner.file.as_mut() {
            let entry = Entry {
                key: key.to_string(),
                response: response.to_string(),
            };
            let line = serde_json::to_string(&entry).expect("cache entry serializes");
            if let Err(e) = writeln!(f, "{line}") {
                tracing::warn!(error = %e, "could not append to response cache");
            }
        }
    }

    pub fn len(&self) -> usize {
        self.lock().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(h: &str) -> PromptBundle {
        PromptBundle {
            system_text: "s".into(),
            human_text: h.into(),
            think_suppressed: true,
        }
    }

    #[test]
    fn key_separates_fields() {
        let a = ResponseCache::key("m", &bundle("h"), "q1");
        assert_eq!(a, ResponseCache::key("m", &bundle("h"), "q1"));
        assert_ne!(a, ResponseCache::key("m2", &bundle("h"), "q1"));
        assert_ne!(a, ResponseCache::key("m", &bundle("h2"), "q1"));
        assert_ne!(a, ResponseCache::key("m", &bundle("h"), "q2"));
        assert_ne!(ResponseCache::key("ab", &bundle("h"), "c"), ResponseCache::key("a", &bundle("h"), "bc"));
    }

    #[test]
    fn persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let c = ResponseCache::open(&path).unwrap();
            c.put("k1", "one");
            c.put("k1", "one");
            c.put("k2", "two\nlines");
        }
        std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"key\":\"tor").unwrap();
        let c = ResponseCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("k2").as_deref(), Some("two\nlines"));
        c.put("k3", "three");
        drop(c);
        assert_eq!(ResponseCache::open(&path).unwrap().len(), 3);
    }
}
