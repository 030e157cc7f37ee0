//! The cart agent: sensor producers feeding per-sensor outboxes, one
//! publisher draining them, and the single-writer cart state.

use std::path::Path;
use std::sync::Arc;

use icu_core::{CartKey, CartState, Clock, ControlCommand, CounterError, RecordingState, SeqCounter, TimestampMs};
use icu_transport::{PublishChannel, RoutingKey};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::backoff::Backoff;
use crate::config::CartConfig;
use crate::control::apply_control;
use crate::outbox::{Outbox, OutboxConfig, OutboxError};
use crate::publisher::{Partition, PublishReport, Publisher};
use crate::sim::{generate_tick, SensorSimConfig};
use crate::tagging::{TagError, Tagger};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Outbox(#[from] OutboxError),
    #[error(transparent)]
    Counter(#[from] CounterError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error("envelope: {0}")]
    Envelope(#[from] icu_core::EnvelopeError),
    #[error("seal: {0}")]
    Seal(#[from] icu_core::SealError),
    #[error("routing: {0}")]
    Routing(#[from] icu_transport::RoutingKeyError),
}

/// Identity and key material shared by every producer of a cart.
#[derive(Clone, Debug)]
pub struct CartIdentity {
    pub cart_id: String,
    pub room_id: String,
    pub codec_id: String,
    pub key: CartKey,
}

/// What a producer did at one due tick.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Produced {
    NotDue,
    Enqueued { seq: u64, capture_ts: TimestampMs },
    /// Generated while paused or stopped and dropped before tagging.
    Discarded,
}

/// One sensor: synthetic source, tagger, seq counter and outbox partition.
#[derive(Debug)]
pub struct SensorProducer {
    sim: SensorSimConfig,
    tagger: Tagger,
    counter: SeqCounter,
    outbox: Arc<Mutex<Outbox>>,
    next_due: Option<TimestampMs>,
}

impl SensorProducer {
    pub fn open(
        state_dir: &Path,
        id: &CartIdentity,
        sim: SensorSimConfig,
        outbox_cfg: OutboxConfig,
    ) -> Result<Self, AgentError> {
        let outbox = Outbox::open(&state_dir.join("outbox"), &sim.sensor_id, outbox_cfg)?;
        let seq_dir = state_dir.join("seq");
        std::fs::create_dir_all(&seq_dir).map_err(|source| CounterError::Io { path: seq_dir.clone(), source })?;
        let mut counter = SeqCounter::open(seq_dir.join(format!("{}.seq", sim.sensor_id)))?;
        // an entry may have become durable just before a crash that prevented the
        // counter update; never hand that seq out again
        if outbox.high_water() > counter.last() {
            info!(sensor = %sim.sensor_id, from = counter.last(), to = outbox.high_water(), "advancing seq counter from outbox");
            counter.advance_to(outbox.high_water())?;
        }
        let mut tagger = Tagger::new(&id.cart_id, &id.room_id, &sim.sensor_id, sim.modality)?;
        if let Some(last) = outbox.pending().last() {
            tagger.resume_after(last.enqueue_ts);
        }
        Ok(Self {
            sim,
            tagger,
            counter,
            outbox: Arc::new(Mutex::new(outbox)),
            next_due: None,
        })
    }

    pub fn sensor_id(&self) -> &str {
        &self.sim.sensor_id
    }

    pub fn sim(&self) -> &SensorSimConfig {
        &self.sim
    }

    pub fn outbox(&self) -> &Arc<Mutex<Outbox>> {
        &self.outbox
    }

    pub fn last_seq(&self) -> u64 {
        self.counter.last()
    }

    pub fn last_capture_ts(&self) -> Option<TimestampMs> {
        self.tagger.last_capture_ts()
    }

    pub fn next_due(&self) -> Option<TimestampMs> {
        self.next_due
    }

    fn tick_at(&self, ts: TimestampMs) -> u64 {
        ((ts - self.sim.scenario.epoch_ms).max(0) / self.sim.period_ms()) as u64
    }

    /// Captures one record if the sensor's next slot has arrived. Slots missed
    /// while the agent was not running are skipped, not back-filled.
    pub fn produce(
        &mut self,
        clock: &dyn Clock,
        state: RecordingState,
        id: &CartIdentity,
    ) -> Result<Produced, AgentError> {
        let now = clock.now_ms();
        if self.next_due.is_some_and(|due| now < due) {
            return Ok(Produced::NotDue);
        }
        let capture_ts = self.tagger.capture_time(clock)?;
        let tick = self.tick_at(capture_ts);
        self.next_due = Some(self.sim.scenario.epoch_ms + (tick as i64 + 1) * self.sim.period_ms());
        let raw = generate_tick(&self.sim, tick);
        if state != RecordingState::Recording {
            return Ok(Produced::Discarded);
        }
        let seq = self.counter.last() + 1;
        let env = self
            .tagger
            .tag(raw, capture_ts, seq)
            .seal(&id.codec_id, &id.key)?;
        let bytes = env.encode()?;
        self.outbox.lock().enqueue(seq, now, bytes)?;
        let issued = self.counter.next()?;
        debug_assert_eq!(issued, seq);
        Ok(Produced::Enqueued { seq, capture_ts })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorBacklog {
    pub sensor_id: String,
    pub pending: usize,
    pub oldest_age_ms: Option<i64>,
    pub last_seq: u64,
    pub last_capture_ts: Option<TimestampMs>,
}

pub use icu_core::state::{CartStatus, SensorStatus};

pub struct CartAgent {
    identity: CartIdentity,
    producers: Vec<SensorProducer>,
    partitions: Vec<Partition>,
    publisher: Publisher,
    state: Arc<RwLock<CartState>>,
}

impl CartAgent {
    pub fn open(
        identity: CartIdentity,
        sensors: Vec<SensorSimConfig>,
        state_dir: &Path,
        outbox_cfg: OutboxConfig,
        backoff: Backoff,
        autostart: bool,
    ) -> Result<Self, AgentError> {
        let mut producers = Vec::with_capacity(sensors.len());
        let mut partitions = Vec::with_capacity(sensors.len());
        for sim in sensors {
            let routing_key = RoutingKey::new(&identity.cart_id, sim.modality)?;
            let p = SensorProducer::open(state_dir, &identity, sim, outbox_cfg.clone())?;
            partitions.push(Partition {
                routing_key: routing_key.as_str().to_owned(),
                outbox: p.outbox().clone(),
            });
            producers.push(p);
        }
        let state = CartState {
            recording: if autostart { RecordingState::Recording } else { RecordingState::Stopped },
            ..CartState::default()
        };
        Ok(Self {
            identity,
            producers,
            partitions,
            publisher: Publisher::new(backoff),
            state: Arc::new(RwLock::new(state)),
        })
    }

    pub fn from_config(cfg: &CartConfig, key: CartKey) -> Result<Self, AgentError> {
        let identity = CartIdentity {
            cart_id: cfg.cart_id.clone(),
            room_id: cfg.room_id.clone(),
            codec_id: cfg.codec.clone(),
            key,
        };
        Self::open(
            identity,
            cfg.sensors.clone(),
            &cfg.state_dir,
            OutboxConfig::default(),
            Backoff::new(cfg.seed),
            cfg.autostart,
        )
    }

    pub fn identity(&self) -> &CartIdentity {
        &self.identity
    }

    pub fn producers(&self) -> &[SensorProducer] {
        &self.producers
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn state(&self) -> CartState {
        *self.state.read()
    }

    pub fn state_handle(&self) -> Arc<RwLock<CartState>> {
        self.state.clone()
    }

    /// Applies a control command and returns the resulting state.
    pub fn apply(&self, cmd: ControlCommand) -> CartState {
        let mut s = self.state.write();
        *s = apply_control(*s, cmd);
        info!(cart = %self.identity.cart_id, ?cmd, state = ?*s, "control command applied");
        *s
    }

    /// Runs every producer whose slot is due. A clock regression on one
    /// sensor is logged and skipped; storage failures are returned.
    pub fn capture(&mut self, clock: &dyn Clock) -> Result<Vec<Produced>, AgentError> {
        let rec = self.state.read().recording;
        let mut out = Vec::with_capacity(self.producers.len());
        for p in &mut self.producers {
            match p.produce(clock, rec, &self.identity) {
                Ok(r) => out.push(r),
                Err(AgentError::Tag(e @ TagError::ClockRegression { .. })) => {
                    warn!(sensor = %p.sensor_id(), error = %e, "dropping tick");
                    out.push(Produced::NotDue);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    pub fn publish(&mut self, channel: &mut dyn PublishChannel, now: TimestampMs) -> Result<PublishReport, AgentError> {
        let r = self.publisher.publish_pending(&self.partitions, channel, now)?;
        if r.acked > 0 {
            debug!(acked = r.acked, "published");
        }
        Ok(r)
    }

    pub fn backlog(&self, now: TimestampMs) -> Vec<SensorBacklog> {
        self.producers
            .iter()
            .map(|p| {
                let ob = p.outbox.lock();
                SensorBacklog {
                    sensor_id: p.sensor_id().to_owned(),
                    pending: ob.pending_len(),
                    oldest_age_ms: ob.oldest_pending_ts().map(|t| now - t),
                    last_seq: p.last_seq(),
                    last_capture_ts: p.last_capture_ts(),
                }
            })
            .collect()
    }

    pub fn status(&self) -> CartStatus {
        CartStatus {
            cart_id: self.identity.cart_id.clone(),
            room_id: self.identity.room_id.clone(),
            state: self.state(),
            sensors: self
                .producers
                .iter()
                .map(|p| SensorStatus {
                    sensor_id: p.sensor_id().to_owned(),
                    modality: p.sim.modality,
                    last_capture_ts: p.last_capture_ts(),
                    pending: p.outbox.lock().pending_len(),
                })
                .collect(),
        }
    }

    /// Splits the agent for the threaded runner.
    pub fn into_parts(self) -> AgentParts {
        AgentParts {
            identity: self.identity,
            producers: self.producers,
            partitions: self.partitions,
            publisher: self.publisher,
            state: self.state,
        }
    }
}

pub struct AgentParts {
    pub identity: CartIdentity,
    pub producers: Vec<SensorProducer>,
    pub partitions: Vec<Partition>,
    pub publisher: Publisher,
    pub state: Arc<RwLock<CartState>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SensorSimConfig;
    use icu_core::{Keyring, ManualClock, Modality, RecordEnvelope};
    use icu_transport::{Broker, BrokerConfig, InProcChannel, LinkFaults};

    fn identity() -> CartIdentity {
        CartIdentity {
            cart_id: "c1".into(),
            room_id: "r1".into(),
            codec_id: "deflate".into(),
            key: CartKey::new("k1", [3; 32]),
        }
    }

    fn agent(dir: &Path) -> CartAgent {
        let sensors = vec![
            SensorSimConfig::new(Modality::Noise, "noise0", 1),
            SensorSimConfig::new(Modality::Emg, "emg0", 2),
        ];
        CartAgent::open(identity(), sensors, dir, OutboxConfig::default(), Backoff::new(0), true).unwrap()
    }

    #[test]
    fn produces_once_per_period_with_consecutive_seqs() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(dir.path());
        let clock = ManualClock::new(1_000_000);
        let mut seqs = Vec::new();
        for _ in 0..50 {
            for r in a.capture(&clock).unwrap() {
                if let Produced::Enqueued { seq, .. } = r {
                    seqs.push(seq);
                }
            }
            clock.advance(100);
        }
        // 5 s at 1 envelope/s for two sensors
        assert_eq!(seqs.len(), 10);
        let b = a.backlog(clock.now_ms());
        assert_eq!((b[0].last_seq, b[1].last_seq), (5, 5));
    }

    #[test]
    fn pause_discards_and_start_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(dir.path());
        let clock = ManualClock::new(0);
        a.capture(&clock).unwrap();
        a.apply(ControlCommand::Pause);
        let pause_at = clock.now_ms();
        for _ in 0..10 {
            clock.advance(1_000);
            assert!(a.capture(&clock).unwrap().iter().all(|r| *r == Produced::Discarded));
        }
        a.apply(ControlCommand::Start);
        clock.advance(1_000);
        let r = a.capture(&clock).unwrap();
        assert!(matches!(r[0], Produced::Enqueued { seq: 2, capture_ts } if capture_ts == pause_at + 11_000));
        // nothing captured inside the paused interval
        for p in a.producers() {
            for e in p.outbox().lock().pending() {
                let env = RecordEnvelope::decode(&e.envelope).unwrap();
                assert!(env.capture_ts <= pause_at || env.capture_ts >= pause_at + 10_000);
            }
        }
    }

    #[test]
    fn restart_resumes_seq_without_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        {
            let mut a = agent(dir.path());
            for _ in 0..3 {
                a.capture(&clock).unwrap();
                clock.advance(1_000);
            }
        }
        let mut a = agent(dir.path());
        let r = a.capture(&clock).unwrap();
        assert_eq!(r[0], Produced::Enqueued { seq: 4, capture_ts: 3_000 });
    }

    #[test]
    fn outbox_high_water_wins_over_stale_counter() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        {
            let mut a = agent(dir.path());
            a.capture(&clock).unwrap();
        }
        // simulate a crash between the durable enqueue and the counter update
        let seq_file = dir.path().join("seq").join("noise0.seq");
        std::fs::remove_file(&seq_file).unwrap();
        let mut a = agent(dir.path());
        clock.advance(1_000);
        assert!(matches!(a.capture(&clock).unwrap()[0], Produced::Enqueued { seq: 2, .. }));
    }

    #[test]
    fn envelopes_unseal_to_generated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(dir.path());
        let clock = ManualClock::new(7_000);
        a.capture(&clock).unwrap();
        let ring: Keyring = [identity().key].into_iter().collect();
        let p = &a.producers()[1];
        let e = p.outbox().lock().pending().next().unwrap().clone();
        let env = RecordEnvelope::decode(&e.envelope).unwrap();
        assert_eq!(env.modality, Modality::Emg);
        let plain = icu_core::seal::unseal_payload(&env, &ring).unwrap();
        assert_eq!(plain, generate_tick(p.sim(), 7));
    }

    #[test]
    fn clock_regression_skips_tick_without_consuming_seq() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(dir.path());
        let clock = ManualClock::new(100_000);
        a.capture(&clock).unwrap();
        clock.set(95_000);
        assert!(a.capture(&clock).unwrap().iter().all(|r| *r == Produced::NotDue));
        clock.set(101_000);
        assert!(matches!(a.capture(&clock).unwrap()[0], Produced::Enqueued { seq: 2, .. }));
    }

    #[test]
    fn publishes_into_routing_key_queues() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(dir.path());
        let clock = ManualClock::new(0);
        let broker = Broker::in_memory(BrokerConfig::default(), Arc::new(clock.clone()));
        let mut ch = InProcChannel::new(broker.clone(), LinkFaults::new());
        a.capture(&clock).unwrap();
        assert_eq!(a.publish(&mut ch, 0).unwrap().acked, 2);
        assert_eq!(broker.stats("cart.c1.NOISE").ready, 1);
        assert_eq!(broker.stats("cart.c1.EMG").ready, 1);
    }
}
