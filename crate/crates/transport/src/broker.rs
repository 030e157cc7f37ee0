//! In-process durable broker with per-queue logs and at-least-once delivery.
//!
//! Each queue owns an append-only log of publish and ack records. A message
//! stays in the log until a consumer acknowledges it; unacknowledged
//! deliveries are requeued (flagged as redelivered) when the ack timeout
//! expires or the consumer goes away. Queues are independent: each has its
//! own lock, so a backlog on one never stalls another.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use icu_core::counter::sync_parent;
use icu_core::Clock;
use parking_lot::{Condvar, Mutex, RwLock};
use tracing::{debug, warn};

const REC_PUBLISH: u8 = 1;
const REC_ACK: u8 = 2;

#[derive(Clone, Debug)]
pub struct BrokerConfig {
    /// Unacknowledged deliveries are requeued after this long.
    pub ack_timeout_ms: i64,
    /// Rewrite a queue log once this many ack records have accumulated.
    pub compact_after: usize,
    /// Sync publish records to stable storage before confirming.
    pub sync: bool,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            ack_timeout_ms: 10_000,
            compact_after: 4_096,
            sync: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("queue log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unknown delivery tag {0}")]
    UnknownTag(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub queue: String,
    pub tag: u64,
    pub redelivered: bool,
    pub envelope: Vec<u8>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub ready: usize,
    pub unacked: usize,
}

struct Message {
    bytes: Arc<Vec<u8>>,
    redelivered: bool,
}

struct Inflight {
    msg_id: u64,
    consumer: u64,
    delivered_at: i64,
}

struct QueueState {
    log: Option<QueueLog>,
    messages: HashMap<u64, Message>,
    ready: VecDeque<u64>,
    inflight: HashMap<u64, Inflight>,
    next_msg: u64,
    next_tag: u64,
}

pub(crate) struct Queue {
    name: String,
    state: Mutex<QueueState>,
    available: Condvar,
}

pub struct Broker {
    dir: Option<PathBuf>,
    cfg: BrokerConfig,
    clock: Arc<dyn Clock>,
    queues: RwLock<BTreeMap<String, Arc<Queue>>>,
    next_consumer: AtomicU64,
}

impl Broker {
    /// Opens (or creates) a broker persisting queues under `dir`, replaying
    /// every existing queue log.
    pub fn open(
        dir: impl Into<PathBuf>,
        cfg: BrokerConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Arc<Self>, BrokerError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| BrokerError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut queues = BTreeMap::new();
        let entries = fs::read_dir(&dir).map_err(|source| BrokerError::Io {
            path: dir.clone(),
            source,
        })?;
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("qlog") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()).and_then(unescape_name) else {
                warn!(path = %path.display(), "skipping queue log with unparseable name");
                continue;
            };
            let state = QueueLog::recover(&path, cfg.sync)?;
            queues.insert(
                name.clone(),
                Arc::new(Queue {
                    name,
                    state: Mutex::new(state),
                    available: Condvar::new(),
                }),
            );
        }
        Ok(Arc::new(Self {
            dir: Some(dir),
            cfg,
            clock,
            queues: RwLock::new(queues),
            next_consumer: AtomicU64::new(1),
        }))
    }

    /// A broker without persistence, for tests that do not exercise restarts.
    pub fn in_memory(cfg: BrokerConfig, clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(Self {
            dir: None,
            cfg,
            clock,
            queues: RwLock::new(BTreeMap::new()),
            next_consumer: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.cfg
    }

    pub(crate) fn queue(&self, name: &str) -> Result<Arc<Queue>, BrokerError> {
        if let Some(q) = self.queues.read().get(name) {
            return Ok(q.clone());
        }
        let mut queues = self.queues.write();
        if let Some(q) = queues.get(name) {
            return Ok(q.clone());
        }
        let log = match &self.dir {
            Some(dir) => Some(QueueLog::create(&dir.join(format!("{}.qlog", escape_name(name))), self.cfg.sync)?),
            None => None,
        };
        let q = Arc::new(Queue {
            name: name.to_owned(),
            state: Mutex::new(QueueState {
                log,
                messages: HashMap::new(),
                ready: VecDeque::new(),
                inflight: HashMap::new(),
                next_msg: 1,
                next_tag: 1,
            }),
            available: Condvar::new(),
        });
        queues.insert(name.to_owned(), q.clone());
        Ok(q)
    }

    pub fn queue_names(&self) -> Vec<String> {
        self.queues.read().keys().cloned().collect()
    }

    pub fn publish(&self, queue: &str, bytes: &[u8]) -> Result<(), BrokerError> {
        self.publish_batch(&[(queue, bytes)])
    }

    /// Appends all messages durably (one sync per touched queue) before returning.
    pub fn publish_batch(&self, msgs: &[(&str, &[u8])]) -> Result<(), BrokerError> {
        let mut grouped: BTreeMap<&str, Vec<&[u8]>> = BTreeMap::new();
        for (q, b) in msgs {
            grouped.entry(q).or_default().push(b);
        }
        for (name, bodies) in grouped {
            let q = self.queue(name)?;
            let mut st = q.state.lock();
            let first_id = st.next_msg;
            if let Some(log) = st.log.as_mut() {
                for (i, b) in bodies.iter().enumerate() {
                    log.append(REC_PUBLISH, first_id + i as u64, b)?;
                }
                log.commit()?;
            }
            for b in bodies {
                let id = st.next_msg;
                st.next_msg += 1;
                st.messages.insert(
                    id,
                    Message {
                        bytes: Arc::new(b.to_vec()),
                        redelivered: false,
                    },
                );
                st.ready.push_back(id);
            }
            drop(st);
            q.available.notify_all();
        }
        Ok(())
    }

    /// Registers a consumer on `queue` with at most `prefetch` unacked deliveries.
    pub fn consume(self: &Arc<Self>, queue: &str, prefetch: usize) -> Result<Consumer, BrokerError> {
        let q = self.queue(queue)?;
        Ok(Consumer {
            broker: self.clone(),
            queue: q,
            id: self.next_consumer.fetch_add(1, Ordering::Relaxed),
            prefetch: prefetch.max(1),
        })
    }

    pub fn stats(&self, queue: &str) -> QueueStats {
        match self.queues.read().get(queue) {
            Some(q) => {
                let st = q.state.lock();
                QueueStats {
                    ready: st.ready.len(),
                    unacked: st.inflight.len(),
                }
            }
            None => QueueStats::default(),
        }
    }

    /// Requeues expired deliveries on every queue.
    pub fn sweep_expired(&self) {
        let now = self.clock.now_ms();
        let queues: Vec<_> = self.queues.read().values().cloned().collect();
        for q in queues {
            let requeued = q.state.lock().requeue_expired(now, self.cfg.ack_timeout_ms);
            if requeued > 0 {
                debug!(queue = %q.name, requeued, "ack timeout expired");
                q.available.notify_all();
            }
        }
    }
}

impl QueueState {
    fn requeue(&mut self, mut msg_ids: Vec<u64>) {
        msg_ids.sort_unstable_by(|a, b| b.cmp(a));
        for id in msg_ids {
            if let Some(m) = self.messages.get_mut(&id) {
                m.redelivered = true;
                self.ready.push_front(id);
            }
        }
    }

    fn requeue_expired(&mut self, now: i64, timeout: i64) -> usize {
        let expired: Vec<u64> = self
            .inflight
            .iter()
            .filter(|(_, d)| now - d.delivered_at >= timeout)
            .map(|(tag, _)| *tag)
            .collect();
        let ids: Vec<u64> = expired
            .iter()
            .filter_map(|tag| self.inflight.remove(tag).map(|d| d.msg_id))
            .collect();
        let n = ids.len();
        self.requeue(ids);
        n
    }

    fn settle(&mut self, msg_id: u64, compact_after: usize) -> Result<(), BrokerError> {
        self.messages.remove(&msg_id);
        if let Some(log) = self.log.as_mut() {
            log.append(REC_ACK, msg_id, &[])?;
            log.flush()?;
            if log.ack_records >= compact_after && log.ack_records >= self.messages.len() {
                let mut live: Vec<(u64, Arc<Vec<u8>>)> = self
                    .messages
                    .iter()
                    .map(|(id, m)| (*id, m.bytes.clone()))
                    .collect();
                live.sort_unstable_by_key(|(id, _)| *id);
                log.rewrite(&live)?;
            }
        }
        Ok(())
    }
}

/// A registered consumer. Dropping it requeues everything it has not acked.
pub struct Consumer {
    broker: Arc<Broker>,
    queue: Arc<Queue>,
    id: u64,
    prefetch: usize,
}

impl Consumer {
    pub fn queue_name(&self) -> &str {
        &self.queue.name
    }

    /// Non-blocking: the next ready message, if the prefetch window allows.
    pub fn try_next(&mut self) -> Option<Delivery> {
        let mut st = self.queue.state.lock();
        self.take_locked(&mut st)
    }

    fn take_locked(&self, st: &mut QueueState) -> Option<Delivery> {
        let now = self.broker.clock.now_ms();
        st.requeue_expired(now, self.broker.cfg.ack_timeout_ms);
        let mine = st.inflight.values().filter(|d| d.consumer == self.id).count();
        if mine >= self.prefetch {
            return None;
        }
        while let Some(msg_id) = st.ready.pop_front() {
            let Some(msg) = st.messages.get(&msg_id) else {
                continue;
            };
            let delivery = Delivery {
                queue: self.queue.name.clone(),
                tag: st.next_tag,
                redelivered: msg.redelivered,
                envelope: msg.bytes.as_ref().clone(),
            };
            st.next_tag += 1;
            st.inflight.insert(
                delivery.tag,
                Inflight {
                    msg_id,
                    consumer: self.id,
                    delivered_at: now,
                },
            );
            return Some(delivery);
        }
        None
    }

    /// Blocks up to `timeout` (wall time) for a delivery.
    pub fn next_timeout(&mut self, timeout: Duration) -> Option<Delivery> {
        let deadline = Instant::now() + timeout;
        let mut st = self.queue.state.lock();
        loop {
            if let Some(d) = self.take_locked(&mut st) {
                return Some(d);
            }
            // Wake periodically so ack timeouts are noticed while idle.
            let wait_until = deadline.min(Instant::now() + Duration::from_millis(250));
            if self.queue.available.wait_until(&mut st, wait_until).timed_out() && Instant::now() >= deadline {
                return self.take_locked(&mut st);
            }
        }
    }

    pub fn ack(&mut self, tag: u64) -> Result<(), BrokerError> {
        let mut st = self.queue.state.lock();
        match st.inflight.get(&tag) {
            Some(d) if d.consumer == self.id => {}
            _ => return Err(BrokerError::UnknownTag(tag)),
        }
        let d = st.inflight.remove(&tag).expect("checked above");
        st.settle(d.msg_id, self.broker.cfg.compact_after)
    }

    pub fn reject(&mut self, tag: u64, requeue: bool) -> Result<(), BrokerError> {
        let mut st = self.queue.state.lock();
        match st.inflight.get(&tag) {
            Some(d) if d.consumer == self.id => {}
            _ => return Err(BrokerError::UnknownTag(tag)),
        }
        let d = st.inflight.remove(&tag).expect("checked above");
        if requeue {
            st.requeue(vec![d.msg_id]);
            drop(st);
            self.queue.available.notify_all();
            Ok(())
        } else {
            st.settle(d.msg_id, self.broker.cfg.compact_after)
        }
    }

    pub fn unacked(&self) -> usize {
        let st = self.queue.state.lock();
        st.inflight.values().filter(|d| d.consumer == self.id).count()
    }
}

impl Drop for Consumer {
    fn drop(&mut self) {
        let mut st = self.queue.state.lock();
        let tags: Vec<u64> = st
            .inflight
            .iter()
            .filter(|(_, d)| d.consumer == self.id)
            .map(|(t, _)| *t)
            .collect();
        let ids = tags
            .iter()
            .filter_map(|t| st.inflight.remove(t).map(|d| d.msg_id))
            .collect();
        st.requeue(ids);
        drop(st);
        self.queue.available.notify_all();
    }
}

impl crate::DeliverySource for Consumer {
    fn next_delivery(&mut self, timeout: Duration) -> Result<Option<Delivery>, crate::TransportError> {
        Ok(if timeout.is_zero() {
            self.try_next()
        } else {
            self.next_timeout(timeout)
        })
    }

    fn ack(&mut self, tag: u64) -> Result<(), crate::TransportError> {
        Ok(Consumer::ack(self, tag)?)
    }

    fn reject(&mut self, tag: u64, requeue: bool) -> Result<(), crate::TransportError> {
        Ok(Consumer::reject(self, tag, requeue)?)
    }
}

/// Append-only queue log: `u8 kind | u64 msg_id | u32 len | bytes | u32 crc`.
struct QueueLog {
    path: PathBuf,
    file: BufWriter<File>,
    sync: bool,
    ack_records: usize,
}

impl QueueLog {
    fn io(path: &Path) -> impl FnOnce(io::Error) -> BrokerError + '_ {
        move |source| BrokerError::Io {
            path: path.to_owned(),
            source,
        }
    }

    fn create(path: &Path, sync: bool) -> Result<Self, BrokerError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(Self::io(path))?;
        if sync {
            sync_parent(path).map_err(Self::io(path))?;
        }
        Ok(Self {
            path: path.to_owned(),
            file: BufWriter::new(file),
            sync,
            ack_records: 0,
        })
    }

    /// Replays a log, truncating any torn tail record.
    fn recover(path: &Path, sync: bool) -> Result<QueueState, BrokerError> {
        let mut raw = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(Self::io(path))?;
        let mut messages: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
        let mut ack_records = 0;
        let mut max_id = 0;
        let mut off = 0;
        while let Some((kind, id, body, next)) = parse_record(&raw, off) {
            match kind {
                REC_PUBLISH => {
                    messages.insert(id, body.to_vec());
                }
                REC_ACK => {
                    messages.remove(&id);
                    ack_records += 1;
                }
                _ => break,
            }
            max_id = max_id.max(id);
            off = next;
        }
        if off < raw.len() {
            warn!(path = %path.display(), dropped = raw.len() - off, "truncating torn queue log tail");
            let f = OpenOptions::new().write(true).open(path).map_err(Self::io(path))?;
            f.set_len(off as u64).map_err(Self::io(path))?;
            f.sync_all().map_err(Self::io(path))?;
        }
        let mut log = Self::create(path, sync)?;
        log.ack_records = ack_records;
        let ready = messages.keys().copied().collect();
        let messages = messages
            .into_iter()
            .map(|(id, bytes)| {
                (
                    id,
                    Message {
                        bytes: Arc::new(bytes),
                        redelivered: false,
                    },
                )
            })
            .collect();
        Ok(QueueState {
            log: Some(log),
            messages,
            ready,
            inflight: HashMap::new(),
            next_msg: max_id + 1,
            next_tag: 1,
        })
    }

    fn append(&mut self, kind: u8, id: u64, body: &[u8]) -> Result<(), BrokerError> {
        let rec = encode_record(kind, id, body);
        self.file.write_all(&rec).map_err(Self::io(&self.path))?;
        if kind == REC_ACK {
            self.ack_records += 1;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), BrokerError> {
        self.file.flush().map_err(Self::io(&self.path))
    }

    fn commit(&mut self) -> Result<(), BrokerError> {
        self.flush()?;
        if self.sync {
            self.file.get_ref().sync_data().map_err(Self::io(&self.path))?;
        }
        Ok(())
    }

    fn rewrite(&mut self, live: &[(u64, Arc<Vec<u8>>)]) -> Result<(), BrokerError> {
        let tmp = self.path.with_extension("qlog.tmp");
        {
            let mut f = BufWriter::new(File::create(&tmp).map_err(Self::io(&tmp))?);
            for (id, bytes) in live {
                f.write_all(&encode_record(REC_PUBLISH, *id, bytes))
                    .map_err(Self::io(&tmp))?;
            }
            let f = f.into_inner().map_err(|e| BrokerError::Io {
                path: tmp.clone(),
                source: e.into_error(),
            })?;
            f.sync_all().map_err(Self::io(&tmp))?;
        }
        fs::rename(&tmp, &self.path).map_err(Self::io(&self.path))?;
        sync_parent(&self.path).map_err(Self::io(&self.path))?;
        let file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(Self::io(&self.path))?;
        self.file = BufWriter::new(file);
        self.ack_records = 0;
        Ok(())
    }
}

fn encode_record(kind: u8, id: u64, body: &[u8]) -> Vec<u8> {
    let mut rec = Vec::with_capacity(17 + body.len());
    rec.push(kind);
    rec.extend_from_slice(&id.to_be_bytes());
    rec.extend_from_slice(&(body.len() as u32).to_be_bytes());
    rec.extend_from_slice(body);
    let crc = crc32fast::hash(&rec);
    rec.extend_from_slice(&crc.to_be_bytes());
    rec
}

fn parse_record(raw: &[u8], off: usize) -> Option<(u8, u64, &[u8], usize)> {
    let head = raw.get(off..off + 13)?;
    let kind = head[0];
    let id = u64::from_be_bytes(head[1..9].try_into().unwrap());
    let len = u32::from_be_bytes(head[9..13].try_into().unwrap()) as usize;
    let end = off + 13 + len;
    let body = raw.get(off + 13..end)?;
    let crc = u32::from_be_bytes(raw.get(end..end + 4)?.try_into().unwrap());
    (crc32fast::hash(&raw[off..end]) == crc).then_some((kind, id, body, end + 4))
}

fn escape_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for b in name.bytes() {
        if b.is_ascii_alphanumeric() || b == b'.' || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn unescape_name(s: &str) -> Option<String> {
    let mut out = Vec::with_capacity(s.len());
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = std::str::from_utf8(bytes.get(i + 1..i + 3)?).ok()?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use icu_core::ManualClock;

    fn broker(dir: &Path, clock: &ManualClock) -> Arc<Broker> {
        Broker::open(dir, BrokerConfig::default(), Arc::new(clock.clone())).unwrap()
    }

    #[test]
    fn publish_three_ack_all_delivers_each_once() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        let b = broker(dir.path(), &clock);
        for i in 0..3u8 {
            b.publish("q", &[i]).unwrap();
        }
        let mut c = b.consume("q", 16).unwrap();
        let mut seen = Vec::new();
        while let Some(d) = c.try_next() {
            assert!(!d.redelivered);
            seen.push(d.envelope[0]);
            c.ack(d.tag).unwrap();
        }
        assert_eq!(seen, vec![0, 1, 2]);
        clock.advance(60_000);
        assert!(c.try_next().is_none());
    }

    #[test]
    fn consumer_crash_redelivers_with_flag() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        let b = broker(dir.path(), &clock);
        for i in 1..=3u8 {
            b.publish("q", &[i]).unwrap();
        }
        {
            let mut c = b.consume("q", 16).unwrap();
            let d1 = c.try_next().unwrap();
            c.ack(d1.tag).unwrap();
            let d2 = c.try_next().unwrap();
            assert_eq!(d2.envelope, vec![2]);
            // crash without acking msg 2
        }
        let mut c = b.consume("q", 16).unwrap();
        let d = c.try_next().unwrap();
        assert_eq!(d.envelope, vec![2]);
        assert!(d.redelivered);
        let d3 = c.try_next().unwrap();
        assert_eq!(d3.envelope, vec![3]);
        assert!(!d3.redelivered);
    }

    #[test]
    fn ack_timeout_requeues_with_new_tag() {
        let clock = ManualClock::new(0);
        let b = Broker::in_memory(BrokerConfig::default(), Arc::new(clock.clone()));
        b.publish("q", b"m").unwrap();
        let mut c = b.consume("q", 1).unwrap();
        let first = c.try_next().unwrap();
        clock.advance(9_999);
        assert!(c.try_next().is_none());
        clock.advance(1);
        let again = c.try_next().unwrap();
        assert!(again.redelivered);
        assert_ne!(again.tag, first.tag);
        assert!(matches!(c.ack(first.tag), Err(BrokerError::UnknownTag(_))));
        c.ack(again.tag).unwrap();
    }

    #[test]
    fn unknown_tag_is_an_error() {
        let b = Broker::in_memory(BrokerConfig::default(), Arc::new(ManualClock::new(0)));
        let mut c = b.consume("q", 1).unwrap();
        assert!(matches!(c.ack(99), Err(BrokerError::UnknownTag(99))));
    }

    #[test]
    fn restart_keeps_unacked_messages() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        {
            let b = broker(dir.path(), &clock);
            for i in 0..5u8 {
                b.publish("cart.c1.EMG", &[i]).unwrap();
            }
            let mut c = b.consume("cart.c1.EMG", 16).unwrap();
            let d = c.try_next().unwrap();
            c.ack(d.tag).unwrap();
            let _unacked = c.try_next().unwrap();
            std::mem::forget(c); // simulate kill: no drop-time requeue
        }
        let b = broker(dir.path(), &clock);
        let mut c = b.consume("cart.c1.EMG", 16).unwrap();
        let mut rest = Vec::new();
        while let Some(d) = c.try_next() {
            rest.push(d.envelope[0]);
            c.ack(d.tag).unwrap();
        }
        assert_eq!(rest, vec![1, 2, 3, 4]);
    }

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        {
            let b = broker(dir.path(), &clock);
            b.publish("q", b"whole").unwrap();
        }
        let path = dir.path().join("q.qlog");
        let mut raw = fs::read(&path).unwrap();
        raw.extend_from_slice(&encode_record(REC_PUBLISH, 2, b"partial")[..10]);
        fs::write(&path, raw).unwrap();
        let b = broker(dir.path(), &clock);
        assert_eq!(b.stats("q").ready, 1);
        b.publish("q", b"next").unwrap();
        drop(b);
        let b = broker(dir.path(), &clock);
        assert_eq!(b.stats("q").ready, 2);
    }

    #[test]
    fn compaction_shrinks_log_and_preserves_live_messages() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        let cfg = BrokerConfig {
            compact_after: 8,
            ..BrokerConfig::default()
        };
        let b = Broker::open(dir.path(), cfg.clone(), Arc::new(clock.clone())).unwrap();
        for i in 0..20u8 {
            b.publish("q", &[i; 64]).unwrap();
        }
        let size_before = fs::metadata(dir.path().join("q.qlog")).unwrap().len();
        let mut c = b.consume("q", 32).unwrap();
        for _ in 0..16 {
            let d = c.try_next().unwrap();
            c.ack(d.tag).unwrap();
        }
        drop(c);
        let size_after = fs::metadata(dir.path().join("q.qlog")).unwrap().len();
        assert!(size_after < size_before);
        drop(b);
        let b = Broker::open(dir.path(), cfg, Arc::new(clock)).unwrap();
        assert_eq!(b.stats("q").ready, 4);
    }

    #[test]
    fn backlog_on_one_queue_does_not_block_another() {
        let clock = ManualClock::new(0);
        let b = Broker::in_memory(BrokerConfig::default(), Arc::new(clock));
        for i in 0..1000u32 {
            b.publish("cart.c1.EMG", &i.to_be_bytes()).unwrap();
        }
        let _starved = b.consume("cart.c1.EMG", 4).unwrap();
        b.publish("cart.c1.NOISE", b"n").unwrap();
        let mut other = b.consume("cart.c1.NOISE", 4).unwrap();
        let t = Instant::now();
        let d = other.next_timeout(Duration::from_secs(1)).unwrap();
        assert_eq!(d.envelope, b"n");
        assert!(t.elapsed() < Duration::from_millis(100));
    }

    #[test]
    fn prefetch_window_limits_outstanding() {
        let b = Broker::in_memory(BrokerConfig::default(), Arc::new(ManualClock::new(0)));
        for i in 0..5u8 {
            b.publish("q", &[i]).unwrap();
        }
        let mut c = b.consume("q", 2).unwrap();
        let a = c.try_next().unwrap();
        let _b2 = c.try_next().unwrap();
        assert!(c.try_next().is_none());
        c.ack(a.tag).unwrap();
        assert!(c.try_next().is_some());
    }

    #[test]
    fn queue_names_escape_round_trip() {
        for n in ["cart.c1.RGB_FRAME", "weird/name with space", "ünï"] {
            assert_eq!(unescape_name(&escape_name(n)).as_deref(), Some(n));
        }
    }
}
