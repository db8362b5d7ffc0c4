//! Append-only JSONL cache of structured descriptions.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CaptionError, StructuredDescription};

/// On-disk record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub sample_id: String,
    pub superclass: String,
    pub regions: Vec<String>,
    pub attributes: Vec<String>,
    pub summary: String,
    pub backend_id: String,
    pub template_hash: String,
}

impl CacheRecord {
    pub fn new(key: String, template_hash: &str, d: &StructuredDescription) -> Self {
        Self {
            key,
            sample_id: d.sample_id.clone(),
            superclass: d.superclass.clone(),
            regions: d.regions.clone(),
            attributes: d.region_attributes.clone(),
            summary: d.summary.clone(),
            backend_id: d.backend_id.clone(),
            template_hash: template_hash.to_string(),
        }
    }

    pub fn description(&self) -> StructuredDescription {
        StructuredDescription {
            sample_id: self.sample_id.clone(),
            superclass: self.superclass.clone(),
            regions: self.regions.clone(),
            region_attributes: self.attributes.clone(),
            summary: self.summary.clone(),
            backend_id: self.backend_id.clone(),
        }
    }
}

/// Hex SHA-256 over the fields that determine a caption.
pub fn cache_key(sample_id: &str, backend_id: &str, template_hash: &str, s: usize, reference_ids: &[String]) -> String {
    let canonical = serde_json::json!([sample_id, backend_id, template_hash, s, reference_ids]);
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// Thread-safe description cache, optionally backed by a JSONL file.
///
/// Appends go through a single writer lock; the in-memory index is the
/// source of truth for lookups.
pub struct DescriptionCache {
    path: Option<PathBuf>,
    index: Mutex<HashMap<String, CacheRecord>>,
    writer: Mutex<Option<File>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl DescriptionCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            index: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// Loads `path` if it exists and appends new records to it.
    pub fn open(path: &Path) -> Result<Self, CaptionError> {
        let mut index = HashMap::new();
        if path.exists() {
            let file = File::open(path)?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| CaptionError::CacheInvalid {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                index.insert(rec.key.clone(), rec);
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let writer = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            index: Mutex::new(index),
            writer: Mutex::new(Some(writer)),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<CacheRecord> {
        let found = self.index.lock().expect("cache index poisoned").get(key).cloned();
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn put(&self, record: CacheRecord) -> Result<(), CaptionError> {
        {
            let mut writer = self.writer.lock().expect("cache writer poisoned");
            if let Some(w) = writer.as_mut() {
                let mut line = serde_json::to_string(&record).expect("cache record serializes");
                line.push('\n');
                w.write_all(line.as_bytes())?;
                w.flush()?;
            }
        }
        self.index
            .lock()
            .expect("cache index poisoned")
            .insert(record.key.clone(), record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.lock().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(hits, misses)` since creation or the last reset.
    pub fn stats(&self) -> (usize, usize) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    pub fn reset_stats(&self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }
}
