//! On-disk storage layout shared by the server (writer) and the batch tools
//! (readers).
//!
//! ```text
//! <root>/<study_id>/<MODALITY>/<YYYY-MM-DD>/<cart>_<sensor>_<seq>.bin
//! <root>/<study_id>/<YYYY-MM-DD>.manifest      one JSON object per line
//! <root>/quarantine/<reason>/<cart>_<sensor>_<seq>.bin
//! <root>/quarantine/manifest.jsonl
//! ```
//!
//! Each `.bin` file is a version-1 envelope whose payload is the plaintext
//! (codec `raw`, key id `none`, empty nonce). Dates are UTC.

use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::{Modality, RecordEnvelope, RecordKey, TimestampMs};

pub const QUARANTINE_DIR: &str = "quarantine";
pub const MANIFEST_EXT: &str = "manifest";
pub const PLAIN_CODEC: &str = "raw";
pub const PLAIN_KEY_ID: &str = "none";

/// One line of a day manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cart_id: String,
    pub sensor_id: String,
    pub seq: u64,
    pub capture_ts: TimestampMs,
    pub room_id: String,
    pub modality: Modality,
    pub study_id: String,
    /// Relative to the storage root, `/`-separated.
    pub path: String,
    /// Hex SHA-256 of the plaintext payload.
    pub sha256: String,
}

impl ManifestEntry {
    pub fn key(&self) -> RecordKey {
        RecordKey::new(&self.cart_id, &self.sensor_id, self.seq)
    }
}

#[derive(Clone, Debug)]
pub struct StorageLayout {
    root: PathBuf,
}

pub fn utc_day(ts: TimestampMs) -> String {
    DateTime::<Utc>::from_timestamp_millis(ts)
        .unwrap_or_default()
        .format("%Y-%m-%d")
        .to_string()
}

impl StorageLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn file_name(key: &RecordKey) -> String {
        format!("{}_{}_{}.bin", key.cart_id, key.sensor_id, key.seq)
    }

    /// Path relative to the root for a stored record.
    pub fn relative_record_path(study_id: &str, modality: Modality, capture_ts: TimestampMs, key: &RecordKey) -> String {
        format!("{study_id}/{}/{}/{}", modality.as_str(), utc_day(capture_ts), Self::file_name(key))
    }

    pub fn manifest_path(&self, study_id: &str, day: &str) -> PathBuf {
        self.root.join(study_id).join(format!("{day}.{MANIFEST_EXT}"))
    }

    pub fn quarantine_dir(&self) -> PathBuf {
        self.root.join(QUARANTINE_DIR)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Study ids present under the root.
    pub fn studies(&self) -> io::Result<Vec<String>> {
        let mut out = Vec::new();
        let rd = match fs::read_dir(&self.root) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e),
        };
        for entry in rd {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.file_type()?.is_dir() && name != QUARANTINE_DIR && !name.starts_with('.') {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Day manifests of one study, in date order.
    pub fn manifests(&self, study_id: &str) -> io::Result<Vec<PathBuf>> {
        let dir = self.root.join(study_id);
        let mut out = Vec::new();
        let rd = match fs::read_dir(&dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e),
        };
        for entry in rd {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == MANIFEST_EXT) {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Every manifest entry of a study, ordered by `(capture_ts, key)`.
    /// A torn final line (crash mid-append) is skipped.
    pub fn partition(&self, study_id: &str) -> io::Result<Vec<ManifestEntry>> {
        let mut out = Vec::new();
        for m in self.manifests(study_id)? {
            out.extend(read_manifest(&m)?);
        }
        out.sort_by(|a, b| (a.capture_ts, a.key()).cmp(&(b.capture_ts, b.key())));
        Ok(out)
    }

    /// Entries of one modality in a study.
    pub fn partition_of(&self, study_id: &str, modality: Modality) -> io::Result<Vec<ManifestEntry>> {
        Ok(self.partition(study_id)?.into_iter().filter(|e| e.modality == modality).collect())
    }

    pub fn read_record(&self, entry: &ManifestEntry) -> io::Result<RecordEnvelope> {
        read_plain_record(&self.resolve(&entry.path))
    }
}

/// Reads a JSONL manifest, skipping lines that do not parse.
pub fn read_manifest(path: &Path) -> io::Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(e) => out.push(e),
            Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping unreadable manifest line"),
        }
    }
    Ok(out)
}

pub fn read_plain_record(path: &Path) -> io::Result<RecordEnvelope> {
    let bytes = fs::read(path)?;
    RecordEnvelope::decode(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_path_pattern() {
        let key = RecordKey::new("c1", "rgb0", 42);
        // 2024-03-05T23:59:59.999Z
        let p = StorageLayout::relative_record_path("ab12", Modality::RgbFrame, 1_709_683_199_999, &key);
        assert_eq!(p, "ab12/RGB_FRAME/2024-03-05/c1_rgb0_42.bin");
        assert_eq!(utc_day(1_709_683_200_000), "2024-03-06");
    }

    #[test]
    fn partition_reads_and_orders_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let layout = StorageLayout::new(dir.path());
        fs::create_dir_all(dir.path().join("s1")).unwrap();
        let entry = |seq: u64, ts: i64| ManifestEntry {
            cart_id: "c".into(),
            sensor_id: "n".into(),
            seq,
            capture_ts: ts,
            room_id: "r".into(),
            modality: Modality::Noise,
            study_id: "s1".into(),
            path: String::new(),
            sha256: String::new(),
        };
        let line = |e: &ManifestEntry| serde_json::to_string(e).unwrap() + "\n";
        fs::write(layout.manifest_path("s1", "2024-01-02"), line(&entry(3, 30)) + "{\"torn\":").unwrap();
        fs::write(layout.manifest_path("s1", "2024-01-01"), line(&entry(2, 20)) + &line(&entry(1, 10))).unwrap();
        let seqs: Vec<u64> = layout.partition("s1").unwrap().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3]);
        assert_eq!(layout.studies().unwrap(), vec!["s1"]);
    }
}
