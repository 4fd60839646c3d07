//! Recorded-feature storage that keeps entries in memory up to a byte budget
//! and writes the rest to disk.
//!
//! On-disk layout, per pass label: one blob per `(site, t)` holding the keys
//! then the values as little-endian f32, and a `manifest.json` listing every
//! entry with its shape. The manifest carries a format version.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use selfrect_core::attention::{CacheStorage, FeatureRows, KvCache, KvRecord, KvRecorder, KvStore};
use selfrect_core::backend::AttentionSite;
use selfrect_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub site: usize,
    pub t: usize,
    pub rows: usize,
    pub width: usize,
    pub heads: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub label: String,
    pub entries: Vec<ManifestEntry>,
}

fn storage_err(e: impl std::fmt::Display) -> Error {
    Error::Storage(e.to_string())
}

/// File-system safe form of a pass label.
fn dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_blob(path: &Path, kv: &KvRecord) -> Result<()> {
    let mut f = fs::File::create(path).map_err(storage_err)?;
    let mut buf = Vec::with_capacity(kv.byte_len());
    for v in kv.keys().data().iter().chain(kv.values().data()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf).map_err(storage_err)
}

fn read_blob(path: &Path, e: &ManifestEntry) -> Result<KvRecord> {
    let n = e.rows * e.width;
    let mut bytes = Vec::with_capacity(8 * n);
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|err| storage_err(format!("{}: {err}", path.display())))?;
    if bytes.len() != 8 * n {
        return Err(storage_err(format!(
            "{}: {} bytes, manifest implies {}",
            path.display(),
            bytes.len(),
            8 * n
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let (k, v) = floats.split_at(n);
    KvRecord::new(
        FeatureRows::new(e.rows, e.width, k.to_vec())?,
        FeatureRows::new(e.rows, e.width, v.to_vec())?,
        e.heads,
    )
}

/// Read-only view of a pass written to disk.
#[derive(Debug)]
pub struct DiskStore {
    dir: PathBuf,
    manifest: Manifest,
    index: BTreeMap<(AttentionSite, usize), usize>,
}

impl DiskStore {
    /// Opens a pass directory, checking the manifest version.
    pub fn open(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| storage_err(format!("{}: {e}", dir.display())))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(storage_err)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(storage_err(format!(
                "cache manifest version {} (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        let index = manifest
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((AttentionSite(e.site), e.t), i))
            .collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            index,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }
}

impl KvStore for DiskStore {
    fn label(&self) -> &str {
        &self.manifest.label
    }

    fn fetch(&self, site: AttentionSite, t: usize) -> Result<Arc<KvRecord>> {
        let i = *self.index.get(&(site, t)).ok_or_else(|| Error::CacheMiss {
            label: self.manifest.label.clone(),
            site,
            t,
        })?;
        let e = &self.manifest.entries[i];
        read_blob(&self.dir.join(&e.file), e).map(Arc::new)
    }

    fn len(&self) -> usize {
        self.manifest.entries.len()
    }
}

/// Pass with some entries in memory and the rest on disk.
struct SplitStore {
    memory: KvCache,
    disk: Option<DiskStore>,
}

impl KvStore for SplitStore {
    fn label(&self) -> &str {
        self.memory.label()
    }

    fn fetch(&self, site: AttentionSite, t: usize) -> Result<Arc<KvRecord>> {
        match (self.memory.get(site, t), &self.disk) {
            (Ok(kv), _) => Ok(kv),
            (Err(Error::CacheMiss { .. }), Some(d)) => d.fetch(site, t),
            (Err(e), _) => Err(e),
        }
    }

    fn len(&self) -> usize {
        self.memory.len() + self.disk.as_ref().map_or(0, |d| d.len())
    }
}

/// Where recorded features live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residency {
    Memory,
    Disk,
    /// In memory until the shared budget is spent, then on disk.
    Auto {
        budget_bytes: usize,
    },
}

/// [`CacheStorage`] honouring a [`Residency`] policy. All passes created
/// from one storage share its byte budget.
pub struct SpillStorage {
    root: PathBuf,
    residency: Residency,
    used: Arc<AtomicUsize>,
    announced: Arc<AtomicBool>,
    spilled: Arc<AtomicBool>,
}

impl SpillStorage {
    pub fn new(root: impl Into<PathBuf>, residency: Residency) -> Self {
        Self {
            root: root.into(),
            residency,
            used: Arc::new(AtomicUsize::new(0)),
            announced: Arc::new(AtomicBool::new(false)),
            spilled: Arc::new(AtomicBool::new(false)),
        }
    }

    /// Bytes currently held in memory across all passes.
    pub fn resident_bytes(&self) -> usize {
        self.used.load(Ordering::Relaxed)
    }

    /// Whether any entry went to disk.
    pub fn spilled(&self) -> bool {
        self.spilled.load(Ordering::Relaxed)
    }
}

impl CacheStorage for SpillStorage {
    fn create(&self, label: &str) -> Result<Box<dyn KvRecorder>> {
        Ok(Box::new(SpillRecorder {
            memory: KvCache::new(label),
            dir: self.root.join(dir_name(label)),
            entries: Vec::new(),
            residency: self.residency,
            used: self.used.clone(),
            announced: self.announced.clone(),
            spilled: self.spilled.clone(),
        }))
    }
}

struct SpillRecorder {
    memory: KvCache,
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
    residency: Residency,
    used: Arc<AtomicUsize>,
    announced: Arc<AtomicBool>,
    spilled: Arc<AtomicBool>,
}

impl SpillRecorder {
    fn write_to_disk(&mut self, site: AttentionSite, t: usize, kv: KvRecord) -> Result<()> {
        if self.memory.get(site, t).is_ok() || self.entries.iter().any(|e| e.site == site.0 && e.t == t) {
            return Err(Error::Storage(format!(
                "entry ({site}, {t}) of '{}' recorded twice",
                self.memory.label()
            )));
        }
        if self.entries.is_empty() {
            fs::create_dir_all(&self.dir).map_err(|e| storage_err(format!("{}: {e}", self.dir.display())))?;
        }
        let file = format!("site{}-t{}.kv", site.0, t);
        write_blob(&self.dir.join(&file), &kv)?;
        self.spilled.store(true, Ordering::Relaxed);
        self.entries.push(ManifestEntry {
            site: site.0,
            t,
            rows: kv.rows(),
            width: kv.width(),
            heads: kv.heads(),
            file,
        });
        Ok(())
    }
}

impl KvRecorder for SpillRecorder {
    fn put(&mut self, site: AttentionSite, t: usize, kv: KvRecord) -> Result<()> {
        let bytes = kv.byte_len();
        let keep = match self.residency {
            Residency::Memory => true,
            Residency::Disk => false,
            Residency::Auto { budget_bytes } => {
                let before = self.used.fetch_add(bytes, Ordering::Relaxed);
                if before + bytes <= budget_bytes {
                    true
                } else {
                    self.used.fetch_sub(bytes, Ordering::Relaxed);
                    if !self.announced.swap(true, Ordering::Relaxed) {
                        log::warn!(
                            "feature cache exceeds the {} MiB memory budget; spilling further entries to {}",
                            budget_bytes >> 20,
                            self.dir.parent().unwrap_or(&self.dir).display()
                        );
                    }
                    false
                }
            }
        };
        if keep {
            let r = self.memory.insert(site, t, kv);
            if r.is_err() && matches!(self.residency, Residency::Auto { .. }) {
                self.used.fetch_sub(bytes, Ordering::Relaxed);
            }
            r
        } else {
            self.write_to_disk(site, t, kv)
        }
    }

    fn seal(mut self: Box<Self>) -> Result<Arc<dyn KvStore>> {
        self.memory.seal();
        let disk = if self.entries.is_empty() {
            None
        } else {
            let manifest = Manifest {
                version: MANIFEST_VERSION,
                label: self.memory.label().to_string(),
                entries: std::mem::take(&mut self.entries),
            };
            let text = serde_json::to_string_pretty(&manifest).map_err(storage_err)?;
            fs::write(self.dir.join("manifest.json"), text).map_err(storage_err)?;
            Some(DiskStore::open(&self.dir)?)
        };
        let memory = std::mem::replace(&mut self.memory, KvCache::new(""));
        Ok(Arc::new(SplitStore { memory, disk }))
    }
}

/// `MemAvailable` from `/proc/meminfo`, if readable.
pub fn available_memory() -> Option<usize> {
    let text = fs::read_to_string("/proc/meminfo").ok()?;
    text.lines()
        .find(|l| l.starts_with("MemAvailable:"))
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|kb| kb.parse::<usize>().ok())
        .map(|kb| kb * 1024)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(rows: usize, seed: f32) -> KvRecord {
        let d: Vec<f32> = (0..rows * 4).map(|i| seed + i as f32 * 0.5).collect();
        KvRecord::new(
            FeatureRows::new(rows, 4, d.clone()).unwrap(),
            FeatureRows::new(rows, 4, d.iter().map(|v| -v).collect()).unwrap(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let storage = SpillStorage::new(tmp.path(), Residency::Disk);
        let mut rec = storage.create("ref-inversion-0").unwrap();
        rec.put(AttentionSite(3), 7, record(5, 1.25)).unwrap();
        assert!(rec.put(AttentionSite(3), 7, record(5, 0.0)).is_err());
        let store = rec.seal().unwrap();
        assert_eq!(*store.fetch(AttentionSite(3), 7).unwrap(), record(5, 1.25));
        assert!(matches!(store.fetch(AttentionSite(3), 8), Err(Error::CacheMiss { .. })));
        let opened = DiskStore::open(&tmp.path().join("ref-inversion-0")).unwrap();
        assert_eq!(opened.manifest().version, MANIFEST_VERSION);
        assert_eq!(opened.len(), 1);
    }

    #[test]
    fn auto_spills_past_the_budget() {
        let tmp = tempfile::tempdir().unwrap();
        let one = record(4, 0.0).byte_len();
        let storage = SpillStorage::new(tmp.path(), Residency::Auto { budget_bytes: 2 * one });
        let mut rec = storage.create("IR-inversion").unwrap();
        for t in 0..5 {
            rec.put(AttentionSite(0), t, record(4, t as f32)).unwrap();
        }
        assert_eq!(storage.resident_bytes(), 2 * one);
        assert!(storage.spilled());
        let store = rec.seal().unwrap();
        assert_eq!(store.len(), 5);
        for t in 0..5 {
            assert_eq!(*store.fetch(AttentionSite(0), t).unwrap(), record(4, t as f32));
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let m = Manifest {
            version: 99,
            label: "x".into(),
            entries: vec![],
        };
        fs::write(tmp.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(DiskStore::open(tmp.path()).is_err());
    }
}
