//! Crash-safe monotone sequence counters.
//!
//! Each counter lives in its own small file holding the last issued value and
//! a CRC. A new value is written to a temporary file, synced, and renamed over
//! the old one before it is handed out, so a value is never issued twice even
//! if the process dies right after `next`.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CounterError {
    #[error("counter storage error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("counter file {0} is corrupt")]
    Corrupt(PathBuf),
    #[error("counter exhausted")]
    Exhausted,
}

#[derive(Debug)]
pub struct SeqCounter {
    path: PathBuf,
    last: u64,
}

impl SeqCounter {
    /// Opens the counter stored at `path`, starting from zero if absent.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, CounterError> {
        let path = path.into();
        let last = match File::open(&path) {
            Ok(mut f) => {
                let mut buf = Vec::with_capacity(12);
                f.read_to_end(&mut buf).map_err(|source| CounterError::Io {
                    path: path.clone(),
                    source,
                })?;
                decode(&buf).ok_or_else(|| CounterError::Corrupt(path.clone()))?
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(source) => return Err(CounterError::Io { path, source }),
        };
        Ok(Self { path, last })
    }

    pub fn last(&self) -> u64 {
        self.last
    }

    /// Returns the next value. The value is durable before it is returned; on
    /// error the in-memory counter is left unchanged.
    pub fn next(&mut self) -> Result<u64, CounterError> {
        let next = self.last.checked_add(1).ok_or(CounterError::Exhausted)?;
        persist(&self.path, next).map_err(|source| CounterError::Io {
            path: self.path.clone(),
            source,
        })?;
        self.last = next;
        Ok(next)
    }

    /// Moves the counter forward to `value` if it is behind, persisting first.
    /// Used on restart when a record with a higher seq is already durable
    /// elsewhere (the outbox), so that value is never issued again.
    pub fn advance_to(&mut self, value: u64) -> Result<(), CounterError> {
        if value <= self.last {
            return Ok(());
        }
        persist(&self.path, value).map_err(|source| CounterError::Io {
            path: self.path.clone(),
            source,
        })?;
        self.last = value;
        Ok(())
    }
}

fn encode(value: u64) -> [u8; 12] {
    let mut out = [0u8; 12];
    out[..8].copy_from_slice(&value.to_be_bytes());
    let crc = crc32fast::hash(&out[..8]);
    out[8..].copy_from_slice(&crc.to_be_bytes());
    out
}

fn decode(buf: &[u8]) -> Option<u64> {
    if buf.len() != 12 {
        return None;
    }
    let crc = u32::from_be_bytes(buf[8..12].try_into().ok()?);
    (crc32fast::hash(&buf[..8]) == crc).then(|| u64::from_be_bytes(buf[..8].try_into().unwrap()))
}

fn persist(path: &Path, value: u64) -> io::Result<()> {
    let tmp = path.with_extension("seq.tmp");
    {
        let mut f = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(&tmp)?;
        f.write_all(&encode(value))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    sync_parent(path)
}

/// Syncs the directory containing `path` so a rename is durable.
pub fn sync_parent(path: &Path) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        let parent = if parent.as_os_str().is_empty() {
            Path::new(".")
        } else {
            parent
        };
        File::open(parent)?.sync_all()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_counter_starts_at_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = SeqCounter::open(dir.path().join("s.seq")).unwrap();
        assert_eq!(c.next().unwrap(), 1);
    }

    #[test]
    fn increments_from_persisted_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.seq");
        fs::write(&path, encode(41)).unwrap();
        let mut c = SeqCounter::open(&path).unwrap();
        assert_eq!(c.next().unwrap(), 42);
    }

    #[test]
    fn restart_never_reuses_a_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.seq");
        fs::write(&path, encode(41)).unwrap();
        {
            let mut c = SeqCounter::open(&path).unwrap();
            assert_eq!(c.next().unwrap(), 42);
            // dropped without any shutdown hook: simulated crash
        }
        let mut c = SeqCounter::open(&path).unwrap();
        assert_eq!(c.next().unwrap(), 43);
    }

    #[test]
    fn write_failure_leaves_counter_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing-dir").join("s.seq");
        let mut c = SeqCounter::open(&path).unwrap();
        assert!(c.next().is_err());
        assert_eq!(c.last(), 0);
    }

    #[test]
    fn corrupt_file_is_an_error_not_a_reset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.seq");
        let mut bytes = encode(7);
        bytes[3] ^= 0x10;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(SeqCounter::open(&path), Err(CounterError::Corrupt(_))));
    }
}
