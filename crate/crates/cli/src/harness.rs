//! In-process fleet simulation: cart agents on a simulated clock publishing
//! over TLS to a full server with an embedded broker.
//!
//! The agents, outboxes, broker and record store are the production ones;
//! only the clock and the network faults are scripted. Sensor ticks follow
//! the simulated clock, so minutes of fleet time run in seconds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use icu_core::{CartKey, Clock, ManualClock, Modality, PseudonymKey, RecordKey, StorageLayout, TimestampMs};
use icu_edge::{Backoff, CartAgent, CartIdentity, OutboxConfig, Produced, SensorSimConfig};
use icu_server::config::BrokerLink;
use icu_server::{BrokerMode, ServerConfig, ServerHandle};
use icu_transport::{BatchOutcome, ChannelError, Credentials, Endpoint, OutgoingMessage, PublishChannel, TcpPublisher};
use serde::{Deserialize, Serialize};
use tracing::info;

/// 2026-01-05 00:00 UTC.
pub const SIM_EPOCH_MS: TimestampMs = 1_767_571_200_000;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Server(#[from] icu_server::ServerError),
    #[error(transparent)]
    Agent(#[from] icu_edge::AgentError),
    #[error(transparent)]
    Tls(#[from] icu_transport::TlsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Stalled(String),
}

fn setup_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Setup(e.to_string())
}

/// Every modality at its nominal rate.
pub fn cart_sensors(seed: u64) -> Vec<SensorSimConfig> {
    let mut out = Vec::new();
    for (i, m) in Modality::ALL.iter().enumerate() {
        let id = match m {
            Modality::RgbFrame => "rgb0",
            Modality::DepthFrame => "depth0",
            Modality::Accel => "accel0",
            Modality::Emg => "emg0",
            Modality::Noise => "noise0",
            Modality::Light => "light0",
        };
        let mut s = SensorSimConfig::new(*m, id, seed.wrapping_mul(31).wrapping_add(i as u64));
        s.scenario.epoch_ms = SIM_EPOCH_MS;
        out.push(s);
    }
    out
}

pub struct CartSetup {
    pub cart_id: String,
    pub room_id: String,
    pub key: CartKey,
    pub state_dir: PathBuf,
    pub seed: u64,
}

/// Keys, certificates, clinical feed and server config for `n` carts under `root`.
pub struct Topology {
    pub root: PathBuf,
    pub server: ServerConfig,
    pub carts: Vec<CartSetup>,
    pub pseudonym: PseudonymKey,
}

impl Topology {
    /// Each cart gets a room and one patient whose session spans `epoch_ms`
    /// by a day before and thirty days after.
    pub fn prepare(root: &Path, n: usize, seed: u64, sync: bool, epoch_ms: TimestampMs) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(root)?;
        let pki = root.join("pki");
        let mut ids: Vec<String> = (1..=n).map(|i| format!("cart{i}")).collect();
        ids.extend(["broker".to_string(), "server".to_string()]);
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        icu_transport::tls::generate(&pki, &id_refs)?;

        let mut pk = [0u8; 32];
        for (i, b) in pk.iter_mut().enumerate() {
            *b = (seed as u8).wrapping_mul(17).wrapping_add((i as u8).wrapping_mul(29)).wrapping_add(1);
        }
        let pseudonym = PseudonymKey::new(pk.to_vec()).map_err(setup_err)?;
        std::fs::write(root.join("pseudonym.key"), pseudonym.to_hex())?;

        let mut carts = Vec::new();
        let mut keyring = String::new();
        let mut feed = String::new();
        for i in 1..=n {
            let cart_id = format!("cart{i}");
            let room_id = format!("room{i}");
            let mut k = [0u8; 32];
            for (j, b) in k.iter_mut().enumerate() {
                *b = (i as u8).wrapping_mul(41) ^ (j as u8).wrapping_mul(7) ^ seed as u8;
            }
            let key = CartKey::new(&cart_id, k);
            keyring.push_str(&key.to_line());
            keyring.push('\n');
            feed.push_str(
                &serde_json::json!({
                    "type": "session", "patient_id": format!("MRN-SIM-{i:04}"), "room_id": room_id,
                    "cart_id": cart_id, "admission_ts": epoch_ms - 86_400_000, "discharge_ts": epoch_ms + 30 * 86_400_000,
                })
                .to_string(),
            );
            feed.push('\n');
            carts.push(CartSetup {
                state_dir: root.join("carts").join(&cart_id),
                cart_id,
                room_id,
                key,
                seed: seed.wrapping_add(i as u64),
            });
        }
        std::fs::write(root.join("carts.keys"), keyring)?;
        std::fs::write(root.join("feed.jsonl"), feed)?;

        let server = ServerConfig {
            data_dir: root.join("data"),
            pseudonym_key_file: root.join("pseudonym.key"),
            keyring_file: root.join("carts.keys"),
            feed_file: root.join("feed.jsonl"),
            annotations_dir: root.join("annotations"),
            metrics_dir: root.join("metrics"),
            http_bind: "127.0.0.1:0".parse().expect("literal address"),
            carts: carts.iter().map(|c| c.cart_id.clone()).collect(),
            sync,
            feed_reload_ms: 5_000,
            broker: BrokerLink {
                mode: BrokerMode::Embedded,
                addr: "127.0.0.1:0".parse().expect("literal address"),
                credentials_dir: pki,
                identity: "server".into(),
                broker_identity: "broker".into(),
                state_dir: Some(root.join("broker")),
                prefetch: 64,
            },
            control: None,
        };
        Ok(Self { root: root.to_owned(), server, carts, pseudonym })
    }

    pub fn endpoint(&self, cart: &CartSetup, broker: std::net::SocketAddr) -> Result<Endpoint, HarnessError> {
        let creds = Credentials::load(&self.server.broker.credentials_dir, &cart.cart_id)?;
        Ok(Endpoint::new(broker, "broker", creds)?)
    }

    pub fn open_agent(&self, cart: &CartSetup, sync: bool) -> Result<CartAgent, HarnessError> {
        let identity = CartIdentity {
            cart_id: cart.cart_id.clone(),
            room_id: cart.room_id.clone(),
            codec_id: "deflate".into(),
            key: cart.key.clone(),
        };
        let ob = OutboxConfig { sync, ..OutboxConfig::default() };
        Ok(CartAgent::open(identity, cart_sensors(cart.seed), &cart.state_dir, ob, Backoff::new(cart.seed), true)?)
    }
}

/// TLS publisher behind a scripted link: outages refuse every publish, and a
/// one-shot switch lets a batch reach the broker while its confirms are lost.
struct SimLink {
    inner: TcpPublisher,
    down: bool,
    lose_next_confirms: bool,
}

impl PublishChannel for SimLink {
    fn publish_batch(&mut self, msgs: &[OutgoingMessage<'_>]) -> BatchOutcome {
        if self.down {
            return BatchOutcome { confirmed: 0, error: Some(ChannelError::Down) };
        }
        let out = self.inner.publish_batch(msgs);
        if self.lose_next_confirms && out.confirmed > 0 {
            self.lose_next_confirms = false;
            return BatchOutcome { confirmed: 0, error: Some(ChannelError::Disconnected("confirms lost".into())) };
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub start_s: u64,
    pub duration_s: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrashPlan {
    /// Zero-based cart index.
    pub cart: usize,
    pub at_s: u64,
    /// Seconds the agent stays down before restarting.
    pub down_s: u64,
    /// Leave a half-written record at the end of every outbox file, as a
    /// crash in the middle of an append would.
    pub torn_tail: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeliveryScenario {
    pub carts: usize,
    pub seconds: u64,
    pub step_ms: i64,
    pub seed: u64,
    pub outages: Vec<Outage>,
    pub crash: Option<CrashPlan>,
    /// fsync outbox, broker and store writes.
    pub sync: bool,
}

impl Default for DeliveryScenario {
    /// Six carts for 300 simulated seconds at six envelopes per cart-second
    /// (10 800 envelopes), three fleet-wide outages and one agent crash that
    /// also loses the confirms of its last batch.
    fn default() -> Self {
        Self {
            carts: 6,
            seconds: 300,
            step_ms: 100,
            seed: 7,
            outages: vec![
                Outage { start_s: 40, duration_s: 10 },
                Outage { start_s: 110, duration_s: 30 },
                Outage { start_s: 210, duration_s: 20 },
            ],
            crash: Some(CrashPlan { cart: 2, at_s: 170, down_s: 5, torn_tail: true }),
            sync: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub enqueued: usize,
    pub stored: usize,
    pub manifest_entries: usize,
    pub duplicates_in_manifests: usize,
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    pub quarantined: usize,
    pub crashes: usize,
    pub seq_reused: bool,
    pub max_outbox_pending: usize,
    pub wall_ms: u64,
}

impl DeliveryReport {
    pub fn zero_loss(&self) -> bool {
        self.missing.is_empty()
            && self.unexpected.is_empty()
            && self.duplicates_in_manifests == 0
            && self.enqueued == self.stored
            && self.quarantined == 0
            && !self.seq_reused
    }
}

fn wait_until(what: &str, limit: Duration, mut done: impl FnMut() -> bool) -> Result<(), HarnessError> {
    let deadline = Instant::now() + limit;
    while !done() {
        if Instant::now() > deadline {
            return Err(HarnessError::Stalled(format!("timed out waiting for {what}")));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    Ok(())
}

/// Records captured in this step, keyed for the zero-loss comparison.
fn note_enqueued(agent: &CartAgent, produced: &[Produced], enqueued: &mut BTreeSet<RecordKey>, seq_reused: &mut bool) {
    let cart = &agent.identity().cart_id;
    for (i, p) in produced.iter().enumerate() {
        if let Produced::Enqueued { seq, .. } = p {
            let key = RecordKey::new(cart, agent.producers()[i].sensor_id(), *seq);
            if !enqueued.insert(key) {
                *seq_reused = true;
            }
        }
    }
}

/// Runs the zero-loss scenario and compares the stored key set, read back
/// from the on-disk manifests, with the set the agents enqueued.
pub fn run_delivery(root: &Path, sc: &DeliveryScenario) -> Result<DeliveryReport, HarnessError> {
    let started = Instant::now();
    let topo = Topology::prepare(root, sc.carts, sc.seed, sc.sync, SIM_EPOCH_MS)?;
    let clock = ManualClock::new(SIM_EPOCH_MS);
    let server = icu_server::start(&topo.server, Arc::new(clock.clone()))?;
    let broker_addr = server.broker_addr.ok_or_else(|| setup_err("embedded broker has no address"))?;

    let mut agents = Vec::new();
    let mut links = Vec::new();
    for c in &topo.carts {
        agents.push(Some(topo.open_agent(c, sc.sync)?));
        links.push(SimLink { inner: TcpPublisher::new(topo.endpoint(c, broker_addr)?), down: false, lose_next_confirms: false });
    }

    let mut report = DeliveryReport::default();
    let mut enqueued = BTreeSet::new();
    let steps = sc.seconds as i64 * 1000 / sc.step_ms;
    let mut restart_at: Option<(usize, TimestampMs)> = None;
    for step in 0..steps {
        let now = clock.now_ms();
        let t_s = ((now - SIM_EPOCH_MS) / 1000) as u64;
        let down = sc.outages.iter().any(|o| t_s >= o.start_s && t_s < o.start_s + o.duration_s);
        if let Some(cp) = &sc.crash {
            if cp.at_s * 1000 == (step * sc.step_ms) as u64 && agents[cp.cart].is_some() {
                // the in-flight batch lands at the broker but the agent dies
                // before it sees the confirms
                links[cp.cart].lose_next_confirms = true;
                let agent = agents[cp.cart].as_mut().expect("checked above");
                let produced = agent.capture(&clock)?;
                note_enqueued(agent, &produced, &mut enqueued, &mut report.seq_reused);
                agent.publish(&mut links[cp.cart], now)?;
                drop(agents[cp.cart].take());
                if cp.torn_tail {
                    tear_outboxes(&topo.carts[cp.cart].state_dir)?;
                }
                report.crashes += 1;
                restart_at = Some((cp.cart, now + cp.down_s as i64 * 1000));
                info!(cart = cp.cart, "simulated agent crash");
            }
        }
        if let Some((i, at)) = restart_at {
            if now >= at {
                agents[i] = Some(topo.open_agent(&topo.carts[i], sc.sync)?);
                links[i].inner = TcpPublisher::new(topo.endpoint(&topo.carts[i], broker_addr)?);
                restart_at = None;
                info!(cart = i, "agent restarted");
            }
        }
        for (agent, link) in agents.iter_mut().zip(links.iter_mut()) {
            let Some(agent) = agent else { continue };
            link.down = down;
            let produced = agent.capture(&clock)?;
            note_enqueued(agent, &produced, &mut enqueued, &mut report.seq_reused);
            agent.publish(link, now)?;
            for b in agent.backlog(now) {
                report.max_outbox_pending = report.max_outbox_pending.max(b.pending);
            }
        }
        clock.advance(sc.step_ms);
    }

    // connectivity restored: drain every outbox, then the broker
    let drain_deadline = Instant::now() + Duration::from_secs(120);
    loop {
        let mut pending = 0;
        for (agent, link) in agents.iter_mut().zip(links.iter_mut()) {
            let Some(agent) = agent else { continue };
            link.down = false;
            agent.publish(link, clock.now_ms())?;
            pending += agent.backlog(clock.now_ms()).iter().map(|b| b.pending).sum::<usize>();
        }
        if pending == 0 {
            break;
        }
        if Instant::now() > drain_deadline {
            return Err(HarnessError::Stalled(format!("{pending} outbox entries never drained")));
        }
        clock.advance(1_000);
        std::thread::sleep(Duration::from_millis(5));
    }
    drop(agents);
    let broker = server.broker.clone().ok_or_else(|| setup_err("embedded broker missing"))?;
    wait_until("broker queues to drain", Duration::from_secs(120), || {
        broker.queue_names().iter().all(|q| {
            let s = broker.stats(q);
            s.ready == 0 && s.unacked == 0
        })
    })?;
    shutdown_server(server);

    let layout = StorageLayout::new(&topo.server.data_dir);
    let mut stored = BTreeSet::new();
    for study in layout.studies()? {
        for e in layout.partition(&study)? {
            report.manifest_entries += 1;
            if !stored.insert(e.key()) {
                report.duplicates_in_manifests += 1;
            }
        }
    }
    report.quarantined = icu_server::RecordStore::open(&topo.server.data_dir, false)
        .and_then(|s| s.quarantine_entries())
        .map_err(setup_err)?
        .len();
    report.enqueued = enqueued.len();
    report.stored = stored.len();
    report.missing = enqueued.difference(&stored).take(20).map(|k| k.to_string()).collect();
    report.unexpected = stored.difference(&enqueued).take(20).map(|k| k.to_string()).collect();
    report.wall_ms = started.elapsed().as_millis() as u64;
    info!(?report.enqueued, ?report.stored, wall_ms = report.wall_ms, "delivery scenario finished");
    Ok(report)
}

/// Appends the first bytes of an entry record to every outbox file.
fn tear_outboxes(dir: &Path) -> Result<(), HarnessError> {
    use std::io::Write as _;
    for e in std::fs::read_dir(dir)?.flatten() {
        let p = e.path();
        if p.is_dir() {
            tear_outboxes(&p)?;
        } else if p.extension().is_some_and(|x| x == "outbox") {
            let mut f = std::fs::OpenOptions::new().append(true).open(&p)?;
            f.write_all(&[1, 0, 0, 0x40, 0, 0xde, 0xad])?;
        }
    }
    Ok(())
}

fn shutdown_server(server: ServerHandle) {
    server.shutdown();
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacklogScenario {
    pub carts: usize,
    pub seconds: u64,
    pub step_ms: i64,
    pub seed: u64,
    /// Pace the simulated clock against the wall clock.
    pub realtime: bool,
    pub sync: bool,
}

impl Default for BacklogScenario {
    fn default() -> Self {
        Self { carts: 1, seconds: 180, step_ms: 50, seed: 11, realtime: false, sync: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorPeak {
    pub max_pending: usize,
    pub max_age_ms: i64,
    pub enqueued: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BacklogReport {
    /// Keyed by `cart/sensor`.
    pub sensors: BTreeMap<String, SensorPeak>,
    pub wall_ms: u64,
}

impl BacklogReport {
    pub fn max_pending(&self) -> usize {
        self.sensors.values().map(|s| s.max_pending).max().unwrap_or(0)
    }

    pub fn max_age_ms(&self) -> i64 {
        self.sensors.values().map(|s| s.max_age_ms).max().unwrap_or(0)
    }
}

/// Nominal connectivity at the default sensor rates. Backlog is sampled
/// after every capture, before the publisher runs, and again once it has
/// returned. In realtime mode the clock follows the wall clock, so time
/// spent publishing shows up in the entry ages.
pub fn run_backlog(root: &Path, sc: &BacklogScenario) -> Result<BacklogReport, HarnessError> {
    let started = Instant::now();
    let topo = Topology::prepare(root, sc.carts, sc.seed, sc.sync, SIM_EPOCH_MS)?;
    let clock = ManualClock::new(SIM_EPOCH_MS);
    let server = icu_server::start(&topo.server, Arc::new(clock.clone()))?;
    let broker_addr = server.broker_addr.ok_or_else(|| setup_err("embedded broker has no address"))?;
    let mut fleet = Vec::new();
    for c in &topo.carts {
        fleet.push((topo.open_agent(c, sc.sync)?, TcpPublisher::new(topo.endpoint(c, broker_addr)?)));
    }
    let mut report = BacklogReport::default();
    let sample = |report: &mut BacklogReport, agent: &CartAgent, now: TimestampMs| {
        for b in agent.backlog(now) {
            let peak = report.sensors.entry(format!("{}/{}", agent.identity().cart_id, b.sensor_id)).or_default();
            peak.max_pending = peak.max_pending.max(b.pending);
            peak.max_age_ms = peak.max_age_ms.max(b.oldest_age_ms.unwrap_or(0));
            peak.enqueued = b.last_seq;
        }
    };
    let run_ms = sc.seconds as i64 * 1000;
    let loop_start = Instant::now();
    let wall_now = || SIM_EPOCH_MS + loop_start.elapsed().as_millis() as i64;
    let mut step = 0;
    while clock.now_ms() - SIM_EPOCH_MS < run_ms {
        for (agent, link) in fleet.iter_mut() {
            agent.capture(&clock)?;
            sample(&mut report, agent, clock.now_ms());
            agent.publish(link, clock.now_ms())?;
            let after = if sc.realtime { wall_now() } else { clock.now_ms() };
            sample(&mut report, agent, after);
        }
        step += 1;
        if sc.realtime {
            let due = loop_start + Duration::from_millis((step * sc.step_ms) as u64);
            if let Some(d) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(d);
            }
            clock.set(wall_now());
        } else {
            clock.advance(sc.step_ms);
        }
    }
    drop(fleet);
    shutdown_server(server);
    report.wall_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}
