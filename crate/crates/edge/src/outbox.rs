//! Crash-safe per-sensor outbox.
//!
//! Each partition is an append-only log file. Record layout (big-endian):
//!
//! ```text
//! 0x01 ENTRY  u64 seq, i64 enqueue_ts, u32 len, len bytes   | u32 crc
//! 0x02 ACK    u64 seq   (every entry up to seq is acked)     | u32 crc
//! 0x03 BASE   u64 high_water (first record after compaction) | u32 crc
//! ```
//!
//! The CRC covers the kind byte and body. Entries are synced before
//! `enqueue` returns. Ack records are only flushed: losing one to a crash
//! causes a resend, which ingest dedups. Once enough acked entries pile up
//! the log is rewritten with just the pending suffix.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use icu_core::counter::sync_parent;
use icu_core::TimestampMs;
use tracing::warn;

const KIND_ENTRY: u8 = 1;
const KIND_ACK: u8 = 2;
const KIND_BASE: u8 = 3;
const MAX_ENTRY: usize = 64 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct OutboxConfig {
    /// Rewrite the log once this many acked entries sit in it.
    pub compact_after: usize,
    pub sync: bool,
}

impl Default for OutboxConfig {
    fn default() -> Self {
        Self {
            compact_after: 256,
            sync: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OutboxError {
    #[error("outbox {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("seq {seq} is not above the outbox high-water mark {high_water}")]
    SeqNotIncreasing { seq: u64, high_water: u64 },
    #[error("outbox {0} failed an earlier write and could not roll it back")]
    Poisoned(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryStatus {
    Pending,
    Acked,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutboxEntry {
    pub seq: u64,
    pub enqueue_ts: TimestampMs,
    pub envelope: Vec<u8>,
}

#[derive(Debug)]
pub struct Outbox {
    path: PathBuf,
    cfg: OutboxConfig,
    file: File,
    len: u64,
    pending: VecDeque<OutboxEntry>,
    acked_through: u64,
    high_water: u64,
    acked_in_file: usize,
    poisoned: bool,
    #[cfg(test)]
    fail_next_write: bool,
}

fn frame(kind: u8, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 5);
    out.push(kind);
    out.extend_from_slice(body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    out
}

fn entry_record(e: &OutboxEntry) -> Vec<u8> {
    let mut body = Vec::with_capacity(20 + e.envelope.len());
    body.extend_from_slice(&e.seq.to_be_bytes());
    body.extend_from_slice(&e.enqueue_ts.to_be_bytes());
    body.extend_from_slice(&(e.envelope.len() as u32).to_be_bytes());
    body.extend_from_slice(&e.envelope);
    frame(KIND_ENTRY, &body)
}

enum Record {
    Entry(OutboxEntry),
    Ack(u64),
    Base(u64),
}

/// Reads one record; `None` at a clean end, a torn tail, or a bad CRC.
fn read_record(r: &mut impl Read) -> Option<(Record, u64)> {
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind).ok()?;
    let mut buf = vec![kind[0]];
    let record = match kind[0] {
        KIND_ENTRY => {
            let mut head = [0u8; 20];
            r.read_exact(&mut head).ok()?;
            let len = u32::from_be_bytes(head[16..20].try_into().unwrap()) as usize;
            if len > MAX_ENTRY {
                return None;
            }
            let mut envelope = vec![0u8; len];
            r.read_exact(&mut envelope).ok()?;
            buf.extend_from_slice(&head);
            buf.extend_from_slice(&envelope);
            Record::Entry(OutboxEntry {
                seq: u64::from_be_bytes(head[0..8].try_into().unwrap()),
                enqueue_ts: i64::from_be_bytes(head[8..16].try_into().unwrap()),
                envelope,
            })
        }
        KIND_ACK | KIND_BASE => {
            let mut v = [0u8; 8];
            r.read_exact(&mut v).ok()?;
            buf.extend_from_slice(&v);
            let v = u64::from_be_bytes(v);
            if kind[0] == KIND_ACK {
                Record::Ack(v)
            } else {
                Record::Base(v)
            }
        }
        _ => return None,
    };
    let mut crc = [0u8; 4];
    r.read_exact(&mut crc).ok()?;
    (crc32fast::hash(&buf) == u32::from_be_bytes(crc)).then_some((record, buf.len() as u64 + 4))
}

impl Outbox {
    pub fn open(dir: &Path, sensor_id: &str, cfg: OutboxConfig) -> Result<Self, OutboxError> {
        let path = dir.join(format!("{sensor_id}.outbox"));
        let io_err = |source| OutboxError::Io { path: path.clone(), source };
        fs::create_dir_all(dir).map_err(io_err)?;
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io_err)?;
        let mut pending = VecDeque::new();
        let (mut acked_through, mut high_water, mut acked_in_file, mut valid) = (0u64, 0u64, 0usize, 0u64);
        {
            let mut r = BufReader::new(&mut file);
            while let Some((rec, n)) = read_record(&mut r) {
                valid += n;
                match rec {
                    Record::Entry(e) => {
                        high_water = high_water.max(e.seq);
                        if e.seq > acked_through {
                            pending.push_back(e);
                        }
                    }
                    Record::Ack(s) => {
                        while pending.front().is_some_and(|e| e.seq <= s) {
                            pending.pop_front();
                            acked_in_file += 1;
                        }
                        acked_through = acked_through.max(s);
                    }
                    Record::Base(h) => high_water = high_water.max(h),
                }
            }
        }
        let on_disk = file.metadata().map_err(io_err)?.len();
        if on_disk > valid {
            warn!(path = %path.display(), dropped = on_disk - valid, "truncating torn outbox tail");
            file.set_len(valid).map_err(io_err)?;
            file.sync_all().map_err(io_err)?;
        }
        let mut ob = Self {
            path,
            cfg,
            file,
            len: valid,
            pending,
            acked_through,
            high_water,
            acked_in_file,
            poisoned: false,
            #[cfg(test)]
            fail_next_write: false,
        };
        ob.file.seek(SeekFrom::End(0)).map_err(|source| OutboxError::Io { path: ob.path.clone(), source })?;
        Ok(ob)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Highest seq ever enqueued, including compacted entries.
    pub fn high_water(&self) -> u64 {
        self.high_water
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn pending(&self) -> impl Iterator<Item = &OutboxEntry> {
        self.pending.iter()
    }

    pub fn oldest_pending_ts(&self) -> Option<TimestampMs> {
        self.pending.front().map(|e| e.enqueue_ts)
    }

    pub fn status(&self, seq: u64) -> Option<EntryStatus> {
        if seq == 0 || seq > self.high_water {
            None
        } else if self.pending.iter().any(|e| e.seq == seq) {
            Some(EntryStatus::Pending)
        } else {
            Some(EntryStatus::Acked)
        }
    }

    /// Bytes in the log file.
    pub fn file_len(&self) -> u64 {
        self.len
    }

    fn io(&self, source: io::Error) -> OutboxError {
        OutboxError::Io { path: self.path.clone(), source }
    }

    /// Appends `bytes`, rolling the file back to its previous length on failure.
    fn append(&mut self, bytes: &[u8], sync: bool) -> Result<(), OutboxError> {
        if self.poisoned {
            return Err(OutboxError::Poisoned(self.path.clone()));
        }
        let result = (|| {
            #[cfg(test)]
            if std::mem::take(&mut self.fail_next_write) {
                self.file.write_all(&bytes[..bytes.len() / 2])?;
                return Err(io::Error::new(io::ErrorKind::StorageFull, "no space left on device"));
            }
            self.file.write_all(bytes)?;
            if sync {
                self.file.sync_data()?;
            }
            Ok(())
        })();
        match result {
            Ok(()) => {
                self.len += bytes.len() as u64;
                Ok(())
            }
            Err(e) => {
                if self.file.set_len(self.len).is_err() {
                    self.poisoned = true;
                }
                Err(self.io(e))
            }
        }
    }

    /// Durably appends an envelope. `seq` must exceed every earlier seq.
    pub fn enqueue(&mut self, seq: u64, enqueue_ts: TimestampMs, envelope: Vec<u8>) -> Result<u64, OutboxError> {
        if seq <= self.high_water {
            return Err(OutboxError::SeqNotIncreasing { seq, high_water: self.high_water });
        }
        if self.acked_in_file >= self.cfg.compact_after.max(1) {
            self.compact()?;
        }
        let entry = OutboxEntry { seq, enqueue_ts, envelope };
        self.append(&entry_record(&entry), self.cfg.sync)?;
        self.high_water = seq;
        self.pending.push_back(entry);
        Ok(seq)
    }

    /// Marks every pending entry with seq ≤ `seq` as acked.
    pub fn ack_through(&mut self, seq: u64) -> Result<usize, OutboxError> {
        let n = self.pending.iter().take_while(|e| e.seq <= seq).count();
        if n == 0 {
            return Ok(0);
        }
        self.append(&frame(KIND_ACK, &seq.to_be_bytes()), false)?;
        self.file.flush().map_err(|e| self.io(e))?;
        self.pending.drain(..n);
        self.acked_through = seq;
        self.acked_in_file += n;
        Ok(n)
    }

    /// Rewrites the log with only the pending entries.
    pub fn compact(&mut self) -> Result<(), OutboxError> {
        let tmp = self.path.with_extension("outbox.tmp");
        let mut bytes = frame(KIND_BASE, &self.high_water.to_be_bytes());
        for e in &self.pending {
            bytes.extend_from_slice(&entry_record(e));
        }
        let write = || -> io::Result<File> {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &self.path)?;
            sync_parent(&self.path)?;
            let mut f = OpenOptions::new().read(true).append(true).open(&self.path)?;
            f.seek(SeekFrom::End(0))?;
            Ok(f)
        };
        self.file = write().map_err(|e| self.io(e))?;
        self.len = bytes.len() as u64;
        self.acked_in_file = 0;
        Ok(())
    }

    /// Flushes buffered ack records to stable storage.
    pub fn sync(&mut self) -> Result<(), OutboxError> {
        self.file.sync_data().map_err(|e| self.io(e))
    }

    #[cfg(test)]
    pub(crate) fn fail_next_write(&mut self) {
        self.fail_next_write = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open(dir: &Path, compact_after: usize) -> Outbox {
        Outbox::open(dir, "s1", OutboxConfig { compact_after, sync: true }).unwrap()
    }

    #[test]
    fn enqueue_survives_reopen_as_pending() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut ob = open(dir.path(), 256);
            ob.enqueue(1, 10, b"hello".to_vec()).unwrap();
            // dropped without any shutdown step, like a killed process
        }
        let ob = open(dir.path(), 256);
        assert_eq!(ob.pending_len(), 1);
        assert_eq!(ob.status(1), Some(EntryStatus::Pending));
        assert_eq!(ob.pending().next().unwrap().envelope, b"hello");
    }

    #[test]
    fn thousand_entries_stay_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut ob = Outbox::open(dir.path(), "s1", OutboxConfig { compact_after: 256, sync: false }).unwrap();
        for s in 1..=1000u64 {
            ob.enqueue(s, s as i64, s.to_be_bytes().to_vec()).unwrap();
        }
        drop(ob);
        let ob = open(dir.path(), 256);
        let seqs: Vec<u64> = ob.pending().map(|e| e.seq).collect();
        assert_eq!(seqs, (1..=1000).collect::<Vec<_>>());
    }

    #[test]
    fn acks_persist_and_compaction_shrinks_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut ob = open(dir.path(), 8);
        for s in 1..=8 {
            ob.enqueue(s, 0, vec![0xAB; 1000]).unwrap();
        }
        let full = ob.file_len();
        assert_eq!(ob.ack_through(8).unwrap(), 8);
        assert_eq!(ob.status(3), Some(EntryStatus::Acked));
        ob.enqueue(9, 0, vec![1; 10]).unwrap();
        assert!(ob.file_len() < full / 10, "{} vs {}", ob.file_len(), full);
        drop(ob);
        let ob = open(dir.path(), 8);
        assert_eq!(ob.pending().map(|e| e.seq).collect::<Vec<_>>(), vec![9]);
        assert_eq!(ob.high_water(), 9);
    }

    #[test]
    fn high_water_survives_compaction_of_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut ob = open(dir.path(), 1);
        ob.enqueue(1, 0, vec![1]).unwrap();
        ob.enqueue(2, 0, vec![2]).unwrap();
        ob.ack_through(2).unwrap();
        ob.compact().unwrap();
        drop(ob);
        let mut ob = open(dir.path(), 1);
        assert_eq!(ob.high_water(), 2);
        assert_eq!(ob.pending_len(), 0);
        assert!(matches!(ob.enqueue(2, 0, vec![]), Err(OutboxError::SeqNotIncreasing { .. })));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = {
            let mut ob = open(dir.path(), 256);
            ob.enqueue(1, 0, vec![1; 50]).unwrap();
            ob.enqueue(2, 0, vec![2; 50]).unwrap();
            ob.path().to_owned()
        };
        let len = fs::metadata(&path).unwrap().len();
        OpenOptions::new().write(true).open(&path).unwrap().set_len(len - 7).unwrap();
        let mut ob = open(dir.path(), 256);
        assert_eq!(ob.pending().map(|e| e.seq).collect::<Vec<_>>(), vec![1]);
        ob.enqueue(2, 0, vec![2; 50]).unwrap();
        drop(ob);
        assert_eq!(open(dir.path(), 256).pending_len(), 2);
    }

    #[test]
    fn write_failure_is_surfaced_and_rolled_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut ob = open(dir.path(), 256);
        ob.enqueue(1, 0, vec![1; 100]).unwrap();
        ob.fail_next_write();
        let err = ob.enqueue(2, 0, vec![2; 100]).unwrap_err();
        assert!(err.to_string().contains("no space"), "{err}");
        assert_eq!(ob.pending_len(), 1);
        ob.enqueue(2, 0, vec![2; 100]).unwrap();
        drop(ob);
        let ob = open(dir.path(), 256);
        assert_eq!(ob.pending().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2]);
    }
}
