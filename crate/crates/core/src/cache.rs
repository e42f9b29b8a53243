//! Content-addressed, append-only record cache.
//!
//! Each entry is one JSON line `{"key": ..., <value fields>}`. Later lines win
//! on load, and concurrent writers may append the same key twice; values are
//! deterministic so duplicates are harmless.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct Line<V> {
    key: String,
    #[serde(flatten)]
    value: V,
}

pub struct RecordCache<V> {
    entries: RwLock<HashMap<String, V>>,
    sink: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl<V: Clone + Serialize + DeserializeOwned> RecordCache<V> {
    pub fn in_memory() -> Self {
        RecordCache {
            entries: RwLock::new(HashMap::new()),
            sink: None,
            path: None,
        }
    }

    /// Opens (or creates) a persisted cache. Unparseable lines, e.g. a torn
    /// final write, are skipped with a warning.
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Line<V>>(&line) {
                    Ok(l) => {
                        entries.insert(l.key, l.value);
                    }
                    Err(e) => log::warn!("{}:{}: skipping cache line: {e}", path.display(), i + 1),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let len = file.metadata()?.len();
        if len > 0 {
            let bytes = std::fs::read(path)?;
            if bytes.last() != Some(&b'\n') {
                file.write_all(b"\n")?;
            }
        }
        Ok(RecordCache {
            entries: RwLock::new(entries),
            sink: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn get(&self, key: &str) -> Option<V> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn put(&self, key: &str, value: V) -> io::Result<()> {
        if let Some(sink) = &self.sink {
            let line = Line {
                key: key.to_string(),
                value: value.clone(),
            };
            let mut text = serde_json::to_string(&line).map_err(io::Error::other)?;
            text.push('\n');
            sink.lock().expect("cache sink").write_all(text.as_bytes())?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(key.to_string(), value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Val {
        x: f64,
    }

    #[test]
    fn persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        {
            let c = RecordCache::<Val>::open(&path).unwrap();
            c.put("k1", Val { x: 1.5 }).unwrap();
            c.put("k1", Val { x: 1.5 }).unwrap();
            c.put("k2", Val { x: -2.0 }).unwrap();
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"key\":\"torn\",")
            .unwrap();
        let c = RecordCache::<Val>::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("k2"), Some(Val { x: -2.0 }));
        c.put("k3", Val { x: 0.0 }).unwrap();
        drop(c);
        let c = RecordCache::<Val>::open(&path).unwrap();
        assert_eq!(c.len(), 3);
    }
}
