//! Real-time cart process: one thread per sensor, a publisher loop, an
//! optional control link to the server, and file-based fault injection.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use icu_core::{Clock, ControlCommand, OffsetClock, SystemClock, TimestampMs};
use icu_transport::conn::PeerRole;
use icu_transport::{
    BatchOutcome, ChannelError, Credentials, Endpoint, Frame, OutgoingMessage, PublishChannel, TcpPublisher,
};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use tracing::{error, info, warn};

use crate::agent::{AgentError, CartAgent, CartStatus, Produced, SensorStatus};
use crate::config::{CartConfig, ConfigError};

const FAULT_FILE: &str = "fault.json";
const STATUS_INTERVAL: Duration = Duration::from_secs(2);

/// A fault injected into a running cart through its state directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Fault {
    NetDown { duration_ms: u64 },
    Crash,
    ClockSkew { offset_ms: i64 },
}

pub fn fault_path(state_dir: &Path) -> PathBuf {
    state_dir.join(FAULT_FILE)
}

/// Drops a fault request where the running agent will pick it up.
pub fn inject_fault(state_dir: &Path, fault: &Fault) -> std::io::Result<()> {
    std::fs::create_dir_all(state_dir)?;
    let tmp = state_dir.join(".fault.json.tmp");
    std::fs::write(&tmp, serde_json::to_vec(fault).expect("fault serializes"))?;
    std::fs::rename(tmp, fault_path(state_dir))
}

fn take_fault(state_dir: &Path) -> Option<Fault> {
    let path = fault_path(state_dir);
    let bytes = std::fs::read(&path).ok()?;
    let _ = std::fs::remove_file(&path);
    match serde_json::from_slice(&bytes) {
        Ok(f) => Some(f),
        Err(e) => {
            warn!(error = %e, "ignoring malformed fault file");
            None
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("credentials: {0}")]
    Tls(#[from] icu_transport::TlsError),
}

impl RunError {
    pub fn is_config(&self) -> bool {
        matches!(self, RunError::Config(_) | RunError::Tls(_))
    }
}

/// Wraps a channel so an injected outage refuses every publish.
pub struct FaultableChannel<C> {
    inner: C,
    down_until: Arc<AtomicI64>,
    clock: Arc<dyn Clock>,
}

impl<C: PublishChannel> FaultableChannel<C> {
    pub fn new(inner: C, down_until: Arc<AtomicI64>, clock: Arc<dyn Clock>) -> Self {
        Self { inner, down_until, clock }
    }
}

impl<C: PublishChannel> PublishChannel for FaultableChannel<C> {
    fn publish_batch(&mut self, msgs: &[OutgoingMessage<'_>]) -> BatchOutcome {
        if self.clock.now_ms() < self.down_until.load(Ordering::SeqCst) {
            return BatchOutcome { confirmed: 0, error: Some(ChannelError::Down) };
        }
        self.inner.publish_batch(msgs)
    }
}

fn endpoint(cfg: &CartConfig, link: &crate::config::LinkConfig) -> Result<Endpoint, RunError> {
    let dir = link
        .credentials_dir
        .clone()
        .or_else(|| cfg.broker.as_ref().and_then(|b| b.credentials_dir.clone()))
        .ok_or_else(|| ConfigError::Invalid {
            field: "broker.credentials_dir".into(),
            reason: "required for network links".into(),
        })?;
    let creds = Credentials::load(&dir, &cfg.cart_id)?;
    Ok(Endpoint::new(link.addr, &link.server_identity, creds)?)
}

/// Runs the cart until `shutdown` is set. Returns after pending acks are
/// flushed and every producer thread has stopped.
pub fn run(cfg: CartConfig, shutdown: Arc<AtomicBool>) -> Result<(), RunError> {
    let key = cfg.load_key()?;
    let broker_link = cfg.broker.clone().ok_or_else(|| ConfigError::Invalid {
        field: "broker".into(),
        reason: "a broker link is required to run".into(),
    })?;
    let broker_ep = endpoint(&cfg, &broker_link)?;
    let control_ep = cfg.control.as_ref().map(|c| endpoint(&cfg, c)).transpose()?;

    let clock = Arc::new(OffsetClock::new(SystemClock));
    let agent = CartAgent::from_config(&cfg, key)?;
    let status_template = agent.status();
    let parts = agent.into_parts();
    let identity = Arc::new(parts.identity);
    let state = parts.state;
    let last_capture: Arc<Vec<AtomicI64>> =
        Arc::new(parts.producers.iter().map(|p| AtomicI64::new(p.last_capture_ts().unwrap_or(i64::MIN))).collect());
    info!(cart = %identity.cart_id, sensors = parts.producers.len(), "cart agent starting");

    let mut handles = Vec::new();
    for (i, mut producer) in parts.producers.into_iter().enumerate() {
        let (clock, state, identity, shutdown, last_capture) =
            (clock.clone(), state.clone(), identity.clone(), shutdown.clone(), last_capture.clone());
        handles.push(thread::Builder::new().name(format!("sensor-{}", producer.sensor_id())).spawn(move || {
            while !shutdown.load(Ordering::SeqCst) {
                let rec = state.read().recording;
                match producer.produce(&*clock, rec, &identity) {
                    Ok(Produced::Enqueued { capture_ts, .. }) => last_capture[i].store(capture_ts, Ordering::SeqCst),
                    Ok(_) => {}
                    Err(AgentError::Tag(e)) => warn!(sensor = %producer.sensor_id(), error = %e, "dropping tick"),
                    Err(e) => {
                        // storage failure: stop this sensor rather than lose data silently
                        error!(sensor = %producer.sensor_id(), error = %e, "sensor stopped");
                        return;
                    }
                }
                let wait = producer
                    .next_due()
                    .map_or(50, |due| (due - clock.now_ms()).clamp(1, 50));
                thread::sleep(Duration::from_millis(wait as u64));
            }
        }).expect("spawn sensor thread"));
    }

    if let Some(ep) = control_ep {
        let (state, shutdown, partitions, last_capture) =
            (state.clone(), shutdown.clone(), parts.partitions.clone(), last_capture.clone());
        let template = status_template.clone();
        handles.push(thread::Builder::new().name("control-link".into()).spawn(move || {
            control_link(ep, state, shutdown, move |s| {
                let mut st = template.clone();
                st.state = s;
                for (i, sensor) in st.sensors.iter_mut().enumerate() {
                    let ts = last_capture[i].load(Ordering::SeqCst);
                    *sensor = SensorStatus {
                        last_capture_ts: (ts != i64::MIN).then_some(ts),
                        pending: partitions[i].outbox.lock().pending_len(),
                        ..sensor.clone()
                    };
                }
                st
            })
        }).expect("spawn control thread"));
    }

    let down_until = Arc::new(AtomicI64::new(i64::MIN));
    let mut channel = FaultableChannel::new(TcpPublisher::new(broker_ep), down_until.clone(), clock.clone());
    let mut publisher = parts.publisher;
    let mut ticks = 0u64;
    while !shutdown.load(Ordering::SeqCst) {
        if ticks % 4 == 0 {
            if let Some(f) = take_fault(&cfg.state_dir) {
                info!(fault = ?f, "fault injected");
                match f {
                    Fault::NetDown { duration_ms } => {
                        down_until.store(clock.now_ms() + duration_ms as i64, Ordering::SeqCst)
                    }
                    Fault::Crash => {
                        error!("injected crash");
                        std::process::abort();
                    }
                    Fault::ClockSkew { offset_ms } => clock.set_offset(offset_ms),
                }
            }
        }
        if let Err(e) = publisher.publish_pending(&parts.partitions, &mut channel, clock.now_ms()) {
            error!(error = %e, "outbox failure while acking");
        }
        ticks += 1;
        thread::sleep(Duration::from_millis(50));
    }
    for h in handles {
        let _ = h.join();
    }
    // one last drain so a clean stop leaves as little pending as possible
    let _ = publisher.publish_pending(&parts.partitions, &mut channel, i64::MAX);
    for p in &parts.partitions {
        if let Err(e) = p.outbox.lock().sync() {
            warn!(error = %e, "outbox sync on shutdown failed");
        }
    }
    info!(cart = %identity.cart_id, "cart agent stopped");
    Ok(())
}

/// Keeps a control connection to the server: periodic STATUS frames and
/// CONTROL requests answered with the resulting cart state.
fn control_link(
    ep: Endpoint,
    state: Arc<RwLock<icu_core::CartState>>,
    shutdown: Arc<AtomicBool>,
    status: impl Fn(icu_core::CartState) -> CartStatus,
) {
    let mut retry = crate::backoff::Backoff::new(7);
    while !shutdown.load(Ordering::SeqCst) {
        let mut conn = match ep.connect(PeerRole::Cart) {
            Ok(c) => c,
            Err(e) => {
                let d = retry.next_delay_ms();
                warn!(error = %e, retry_ms = d, "control link connect failed");
                sleep_unless(&shutdown, Duration::from_millis(d));
                continue;
            }
        };
        retry.reset();
        info!(server = %conn.peer(), "control link up");
        let mut last_status: Option<std::time::Instant> = None;
        let result: Result<(), icu_transport::ConnError> = (|| loop {
            if shutdown.load(Ordering::SeqCst) {
                return Ok(());
            }
            if last_status.map_or(true, |t| t.elapsed() >= STATUS_INTERVAL) {
                let body = serde_json::to_vec(&status(*state.read())).expect("status serializes");
                conn.send(&Frame::Status { body })?;
                last_status = Some(std::time::Instant::now());
            }
            conn.maintain()?;
            if let Some(Frame::Control { request_id, command }) = conn.poll(Duration::from_millis(200))? {
                let (ok, body) = match serde_json::from_slice::<ControlCommand>(&command) {
                    Ok(cmd) => {
                        let mut s = state.write();
                        *s = crate::control::apply_control(*s, cmd);
                        info!(?cmd, state = ?*s, "remote control command");
                        (true, serde_json::to_vec(&*s).expect("state serializes"))
                    }
                    Err(e) => (false, serde_json::to_vec(&serde_json::json!({ "error": e.to_string() })).unwrap()),
                };
                conn.send(&Frame::ControlAck { request_id, ok, body })?;
                // push the new state right away so the server's view is current
                last_status = None;
            }
        })();
        if let Err(e) = result {
            warn!(error = %e, "control link lost");
        }
        conn.shutdown();
    }
}

fn sleep_unless(flag: &AtomicBool, total: Duration) {
    let step = Duration::from_millis(50);
    let mut slept = Duration::ZERO;
    while slept < total && !flag.load(Ordering::SeqCst) {
        thread::sleep(step);
        slept += step;
    }
}

/// Current time per the system clock, for CLI helpers.
pub fn now_ms() -> TimestampMs {
    SystemClock.now_ms()
}
