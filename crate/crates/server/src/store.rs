//! Durable, idempotent record storage with append-only manifests.
//!
//! A record is durable once its file is renamed into place and its manifest
//! line is fsynced; only then is the outcome returned and the broker
//! delivery acknowledged. The dedup index is rebuilt from manifests on open.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use icu_core::counter::sync_parent;
use icu_core::layout::{read_manifest, utc_day, ManifestEntry, StorageLayout};
use icu_core::{Modality, RecordEnvelope, RecordKey, TimestampMs};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::curation::ScrubbedRecord;

pub const QUARANTINE_MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("record {0} is being written by another consumer")]
    Busy(RecordKey),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_owned(), source }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Location {
    Stored { study_id: String, path: String },
    Quarantined { reason: String, path: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StoreOutcome {
    Written(Location),
    Duplicate(Location),
}

/// One line of `quarantine/manifest.jsonl`. Key fields are absent for
/// messages that never decoded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub reason: String,
    pub path: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cart_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_ts: Option<TimestampMs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
}

impl QuarantineEntry {
    pub fn key(&self) -> Option<RecordKey> {
        Some(RecordKey::new(self.cart_id.clone()?, self.sensor_id.clone()?, self.seq?))
    }
}

enum Slot {
    InFlight,
    Done(Location),
}

pub struct RecordStore {
    layout: StorageLayout,
    sync: bool,
    index: Mutex<HashMap<RecordKey, Slot>>,
    appenders: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
}

/// Removes the in-flight claim unless the write completed.
struct Claim<'a> {
    store: &'a RecordStore,
    key: Option<RecordKey>,
}

impl Drop for Claim<'_> {
    fn drop(&mut self) {
        if let Some(k) = self.key.take() {
            self.store.index.lock().remove(&k);
        }
    }
}

impl Claim<'_> {
    fn complete(mut self, loc: Location) {
        let k = self.key.take().expect("claim completes once");
        self.store.index.lock().insert(k, Slot::Done(loc));
    }
}

pub fn hex_digest(h: &[u8; 32]) -> String {
    hex::encode(h)
}

impl RecordStore {
    /// Opens the store and replays every manifest into the dedup index.
    pub fn open(root: impl Into<PathBuf>, sync: bool) -> Result<Self, StoreError> {
        let layout = StorageLayout::new(root);
        let root = layout.root().to_owned();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mut index = HashMap::new();
        for study in layout.studies().map_err(io_err(&root))? {
            for m in layout.manifests(&study).map_err(io_err(&root))? {
                for e in read_manifest(&m).map_err(io_err(&m))? {
                    index.insert(
                        e.key(),
                        Slot::Done(Location::Stored {
                            study_id: e.study_id.clone(),
                            path: e.path.clone(),
                        }),
                    );
                }
            }
        }
        let qm = layout.quarantine_dir().join(QUARANTINE_MANIFEST);
        for e in read_quarantine(&qm)? {
            if let Some(k) = e.key() {
                index.insert(
                    k,
                    Slot::Done(Location::Quarantined {
                        reason: e.reason.clone(),
                        path: e.path.clone(),
                    }),
                );
            }
        }
        tracing::info!(root = %root.display(), records = index.len(), "record store opened");
        Ok(Self {
            layout,
            sync,
            index: Mutex::new(index),
            appenders: Mutex::new(HashMap::new()),
        })
    }

    pub fn layout(&self) -> &StorageLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.index.lock().values().filter(|s| matches!(s, Slot::Done(_))).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn location(&self, key: &RecordKey) -> Option<Location> {
        match self.index.lock().get(key) {
            Some(Slot::Done(l)) => Some(l.clone()),
            _ => None,
        }
    }

    /// Every key at rest, stored or quarantined.
    pub fn keys(&self) -> Vec<RecordKey> {
        let idx = self.index.lock();
        let mut keys: Vec<RecordKey> = idx.iter().filter(|(_, s)| matches!(s, Slot::Done(_))).map(|(k, _)| k.clone()).collect();
        keys.sort();
        keys
    }

    fn claim(&self, key: &RecordKey) -> Result<Result<Claim<'_>, Location>, StoreError> {
        let mut idx = self.index.lock();
        match idx.get(key) {
            Some(Slot::Done(loc)) => Ok(Err(loc.clone())),
            Some(Slot::InFlight) => Err(StoreError::Busy(key.clone())),
            None => {
                idx.insert(key.clone(), Slot::InFlight);
                Ok(Ok(Claim {
                    store: self,
                    key: Some(key.clone()),
                }))
            }
        }
    }

    fn appender(&self, path: &Path) -> Arc<Mutex<()>> {
        self.appenders.lock().entry(path.to_owned()).or_default().clone()
    }

    fn write_file(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let dir = path.parent().expect("record paths have a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(bytes).map_err(io_err(&tmp))?;
            if self.sync {
                f.sync_all().map_err(io_err(&tmp))?;
            }
        }
        fs::rename(&tmp, path).map_err(io_err(path))?;
        if self.sync {
            sync_parent(path).map_err(io_err(path))?;
        }
        Ok(())
    }

    fn append_line(&self, path: &Path, line: &str) -> Result<(), StoreError> {
        let lock = self.appender(path);
        let _g = lock.lock();
        let created = !path.exists();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        f.write_all(line.as_bytes()).map_err(io_err(path))?;
        f.write_all(b"\n").map_err(io_err(path))?;
        if self.sync {
            f.sync_data().map_err(io_err(path))?;
            if created {
                sync_parent(path).map_err(io_err(path))?;
            }
        }
        Ok(())
    }

    /// Stores a scrubbed record unless its key is already at rest.
    pub fn store(&self, rec: &ScrubbedRecord) -> Result<StoreOutcome, StoreError> {
        let claim = match self.claim(&rec.key)? {
            Ok(c) => c,
            Err(loc) => return Ok(StoreOutcome::Duplicate(loc)),
        };
        let rel = StorageLayout::relative_record_path(&rec.study_id, rec.modality, rec.capture_ts, &rec.key);
        let bytes = rec.to_envelope().encode().expect("stored envelopes are valid");
        self.write_file(&self.layout.resolve(&rel), &bytes)?;
        let entry = ManifestEntry {
            cart_id: rec.key.cart_id.clone(),
            sensor_id: rec.key.sensor_id.clone(),
            seq: rec.key.seq,
            capture_ts: rec.capture_ts,
            room_id: rec.room_id.clone(),
            modality: rec.modality,
            study_id: rec.study_id.clone(),
            path: rel.clone(),
            sha256: hex_digest(&rec.payload_hash),
        };
        let manifest = self.layout.manifest_path(&rec.study_id, &utc_day(rec.capture_ts));
        self.append_line(&manifest, &serde_json::to_string(&entry).expect("manifest entry serializes"))?;
        let loc = Location::Stored {
            study_id: rec.study_id.clone(),
            path: rel,
        };
        claim.complete(loc.clone());
        Ok(StoreOutcome::Written(loc))
    }

    /// Quarantines a decoded record (plaintext payload, no study).
    pub fn quarantine_record(&self, env: &RecordEnvelope, reason: &str) -> Result<StoreOutcome, StoreError> {
        let claim = match self.claim(&env.key)? {
            Ok(c) => c,
            Err(loc) => return Ok(StoreOutcome::Duplicate(loc)),
        };
        let rel = format!("{}/{reason}/{}", icu_core::layout::QUARANTINE_DIR, StorageLayout::file_name(&env.key));
        self.write_file(&self.layout.resolve(&rel), &env.encode().expect("decoded envelopes re-encode"))?;
        let entry = QuarantineEntry {
            reason: reason.to_owned(),
            path: rel.clone(),
            sha256: hex_digest(&env.payload_hash),
            cart_id: Some(env.key.cart_id.clone()),
            sensor_id: Some(env.key.sensor_id.clone()),
            seq: Some(env.key.seq),
            capture_ts: Some(env.capture_ts),
            room_id: Some(env.room_id.clone()),
            modality: Some(env.modality),
        };
        self.append_quarantine(&entry)?;
        let loc = Location::Quarantined {
            reason: reason.to_owned(),
            path: rel,
        };
        claim.complete(loc.clone());
        Ok(StoreOutcome::Written(loc))
    }

    /// Quarantines raw bytes that could not be decoded or authenticated.
    /// Named by content hash; the key is kept only if it decoded.
    pub fn quarantine_poison(&self, bytes: &[u8], decoded: Option<&RecordEnvelope>, reason: &str) -> Result<Location, StoreError> {
        use sha2::{Digest, Sha256};
        let digest: [u8; 32] = Sha256::digest(bytes).into();
        let hex = hex_digest(&digest);
        let rel = format!("{}/{reason}/{hex}.bin", icu_core::layout::QUARANTINE_DIR);
        self.write_file(&self.layout.resolve(&rel), bytes)?;
        let entry = QuarantineEntry {
            reason: reason.to_owned(),
            path: rel.clone(),
            sha256: hex,
            cart_id: decoded.map(|e| e.key.cart_id.clone()),
            sensor_id: decoded.map(|e| e.key.sensor_id.clone()),
            seq: decoded.map(|e| e.key.seq),
            capture_ts: decoded.map(|e| e.capture_ts),
            room_id: decoded.map(|e| e.room_id.clone()),
            modality: decoded.map(|e| e.modality),
        };
        // Poison does not enter the dedup index: a later authentic copy of
        // the same key must still be stored.
        self.append_quarantine(&QuarantineEntry {
            cart_id: None,
            sensor_id: None,
            seq: None,
            ..entry
        })?;
        Ok(Location::Quarantined {
            reason: reason.to_owned(),
            path: rel,
        })
    }

    fn append_quarantine(&self, e: &QuarantineEntry) -> Result<(), StoreError> {
        let path = self.layout.quarantine_dir().join(QUARANTINE_MANIFEST);
        self.append_line(&path, &serde_json::to_string(e).expect("quarantine entry serializes"))
    }

    pub fn quarantine_entries(&self) -> Result<Vec<QuarantineEntry>, StoreError> {
        read_quarantine(&self.layout.quarantine_dir().join(QUARANTINE_MANIFEST))
    }
}

fn read_quarantine(path: &Path) -> Result<Vec<QuarantineEntry>, StoreError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(StoreError::Io { path: path.to_owned(), source }),
    };
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use icu_core::seal::payload_digest;

    fn rec(seq: u64, ts: i64) -> ScrubbedRecord {
        let plain = vec![seq as u8; 8];
        ScrubbedRecord {
            key: RecordKey::new("c1", "light0", seq),
            capture_ts: ts,
            room_id: "r1".into(),
            modality: Modality::Light,
            study_id: "0123456789abcdef".into(),
            payload_hash: payload_digest(&plain),
            plain,
        }
    }

    #[test]
    fn store_is_idempotent_and_replayable() {
        let dir = tempfile::tempdir().unwrap();
        let s = RecordStore::open(dir.path(), true).unwrap();
        let r = rec(1, 1_700_000_000_000);
        let first = s.store(&r).unwrap();
        let StoreOutcome::Written(Location::Stored { path, .. }) = &first else {
            panic!("expected a write, got {first:?}")
        };
        assert_eq!(path, "0123456789abcdef/LIGHT/2023-11-14/c1_light0_1.bin");
        let bytes = fs::read(dir.path().join(path)).unwrap();
        assert!(matches!(s.store(&r).unwrap(), StoreOutcome::Duplicate(_)));
        assert_eq!(fs::read(dir.path().join(path)).unwrap(), bytes);

        drop(s);
        let s = RecordStore::open(dir.path(), true).unwrap();
        assert_eq!(s.len(), 1);
        assert!(matches!(s.store(&r).unwrap(), StoreOutcome::Duplicate(_)));
        let part = s.layout().partition("0123456789abcdef").unwrap();
        assert_eq!(part.len(), 1);
        let env = s.layout().read_record(&part[0]).unwrap();
        assert_eq!(env.payload, r.plain);
    }

    #[test]
    fn failed_write_releases_claim() {
        let dir = tempfile::tempdir().unwrap();
        let s = RecordStore::open(dir.path(), false).unwrap();
        // a file where the study directory should be makes the write fail
        fs::write(dir.path().join("0123456789abcdef"), b"x").unwrap();
        assert!(s.store(&rec(1, 0)).is_err());
        fs::remove_file(dir.path().join("0123456789abcdef")).unwrap();
        assert!(matches!(s.store(&rec(1, 0)).unwrap(), StoreOutcome::Written(_)));
    }

    #[test]
    fn quarantine_dedups_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let s = RecordStore::open(dir.path(), false).unwrap();
        let env = rec(5, 0).to_envelope();
        assert!(matches!(s.quarantine_record(&env, "no_session").unwrap(), StoreOutcome::Written(_)));
        assert!(matches!(s.quarantine_record(&env, "no_session").unwrap(), StoreOutcome::Duplicate(_)));
        s.quarantine_poison(b"garbage", None, "poison").unwrap();
        drop(s);
        let s = RecordStore::open(dir.path(), false).unwrap();
        assert_eq!(s.keys(), vec![RecordKey::new("c1", "light0", 5)]);
        assert_eq!(s.quarantine_entries().unwrap().len(), 2);
    }
}
