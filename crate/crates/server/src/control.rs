//! Remote cart control over each cart's authenticated control link.
//!
//! A cart connects with role `Cart`, sends STATUS heartbeats, and answers
//! every CONTROL frame with a CONTROL_ACK carrying its resulting state.
//! Commands are never queued for offline carts.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use icu_core::{CartState, CartStatus, ControlCommand};
use icu_transport::tls::{Credentials, TlsError};
use icu_transport::wire::{error_code, Frame};
use icu_transport::{Conn, PeerRole};
use parking_lot::Mutex;
use rustls::ServerConfig;
use tracing::{debug, info, warn};

use crate::health::HealthRegistry;

/// End-to-end budget for one command.
pub const CONTROL_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("cart {0} is offline")]
    Offline(String),
    #[error("cart {0} did not acknowledge within {1:?}")]
    Timeout(String, Duration),
    #[error("cart {cart} rejected the command: {reason}")]
    Rejected { cart: String, reason: String },
}

/// Something that can deliver a command to one cart and wait for its state.
pub trait CartLink: Send + Sync {
    fn send(&self, cmd: ControlCommand, timeout: Duration) -> Result<CartState, ControlError>;
}

struct Attached {
    id: u64,
    link: Arc<dyn CartLink>,
}

pub struct ControlHub {
    links: Mutex<HashMap<String, Attached>>,
    next_id: AtomicU64,
    health: Arc<HealthRegistry>,
}

impl ControlHub {
    pub fn new(health: Arc<HealthRegistry>) -> Self {
        Self {
            links: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            health,
        }
    }

    /// Attaches a link, replacing any previous one; returns a token for
    /// [`ControlHub::detach`].
    pub fn attach(&self, cart_id: &str, link: Arc<dyn CartLink>) -> u64 {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.links.lock().insert(cart_id.to_owned(), Attached { id, link });
        id
    }

    /// Detaches only if `token` is still the current link.
    pub fn detach(&self, cart_id: &str, token: u64) {
        let mut links = self.links.lock();
        if links.get(cart_id).is_some_and(|a| a.id == token) {
            links.remove(cart_id);
        }
    }

    pub fn is_attached(&self, cart_id: &str) -> bool {
        self.links.lock().contains_key(cart_id)
    }

    /// Forwards `cmd` and returns the cart's post-command state.
    pub fn send(&self, cart_id: &str, cmd: ControlCommand, timeout: Duration) -> Result<CartState, ControlError> {
        let link = self
            .links
            .lock()
            .get(cart_id)
            .map(|a| a.link.clone())
            .ok_or_else(|| ControlError::Offline(cart_id.to_owned()))?;
        if !self.health.is_online(cart_id) {
            return Err(ControlError::Offline(cart_id.to_owned()));
        }
        let state = link.send(cmd, timeout)?;
        self.health.set_cart_state(cart_id, state);
        info!(cart = cart_id, ?cmd, ?state, "control command acknowledged");
        Ok(state)
    }
}

type Reply = Sender<Result<CartState, ControlError>>;

/// The server side of one cart's TLS control connection.
struct ConnLink {
    cart_id: String,
    requests: Sender<(ControlCommand, Reply)>,
}

impl CartLink for ConnLink {
    fn send(&self, cmd: ControlCommand, timeout: Duration) -> Result<CartState, ControlError> {
        let (tx, rx) = bounded(1);
        self.requests
            .send((cmd, tx))
            .map_err(|_| ControlError::Offline(self.cart_id.clone()))?;
        match rx.recv_timeout(timeout) {
            Ok(r) => r,
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => Err(ControlError::Timeout(self.cart_id.clone(), timeout)),
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => Err(ControlError::Offline(self.cart_id.clone())),
        }
    }
}

/// TLS listener for cart control links.
pub struct ControlServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ControlServer {
    pub fn start(bind: SocketAddr, creds: &Credentials, hub: Arc<ControlHub>, health: Arc<HealthRegistry>) -> Result<Self, TlsError> {
        let cfg = creds.server_config()?;
        let io = |source| TlsError::Io {
            path: bind.to_string().into(),
            source,
        };
        let listener = TcpListener::bind(bind).map_err(io)?;
        let addr = listener.local_addr().map_err(io)?;
        listener.set_nonblocking(true).map_err(io)?;
        let stop = Arc::new(AtomicBool::new(false));
        let identity = creds.identity.clone();
        let accept = {
            let stop = stop.clone();
            thread::Builder::new()
                .name("control-accept".into())
                .spawn(move || accept_loop(listener, cfg, identity, hub, health, stop))
                .expect("spawn control accept thread")
        };
        info!(%addr, "control link listening");
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

fn accept_loop(
    listener: TcpListener,
    cfg: Arc<ServerConfig>,
    identity: String,
    hub: Arc<ControlHub>,
    health: Arc<HealthRegistry>,
    stop: Arc<AtomicBool>,
) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((sock, peer)) => {
                let (cfg, identity, hub, health, stop) = (cfg.clone(), identity.clone(), hub.clone(), health.clone(), stop.clone());
                workers.push(thread::spawn(move || serve(sock, peer, cfg, &identity, &hub, &health, &stop)));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
            Err(e) => {
                warn!(error = %e, "control accept failed");
                thread::sleep(Duration::from_millis(100));
            }
        }
        workers.retain(|h| !h.is_finished());
    }
    for w in workers {
        let _ = w.join();
    }
}

fn serve(
    sock: TcpStream,
    peer: SocketAddr,
    cfg: Arc<ServerConfig>,
    identity: &str,
    hub: &ControlHub,
    health: &HealthRegistry,
    stop: &AtomicBool,
) {
    let _ = sock.set_nonblocking(false);
    let mut conn = match Conn::accept(sock, cfg, identity, PeerRole::Server) {
        Ok(c) => c,
        Err(e) => {
            debug!(%peer, error = %e, "control handshake failed");
            return;
        }
    };
    if conn.peer_role() != PeerRole::Cart {
        let _ = conn.send(&Frame::Error {
            code: error_code::UNEXPECTED,
            message: "control link requires role cart".into(),
        });
        return;
    }
    let cart_id = conn.peer().to_owned();
    let (tx, rx) = unbounded();
    let token = hub.attach(
        &cart_id,
        Arc::new(ConnLink {
            cart_id: cart_id.clone(),
            requests: tx,
        }),
    );
    info!(cart = %cart_id, %peer, "cart control link attached");
    let result = link_loop(&mut conn, &cart_id, &rx, health, stop);
    hub.detach(&cart_id, token);
    if let Err(e) = result {
        info!(cart = %cart_id, error = %e, "cart control link closed");
    }
    conn.shutdown();
}

fn link_loop(
    conn: &mut Conn,
    cart_id: &str,
    requests: &Receiver<(ControlCommand, Reply)>,
    health: &HealthRegistry,
    stop: &AtomicBool,
) -> Result<(), icu_transport::ConnError> {
    let mut pending: HashMap<u64, Reply> = HashMap::new();
    let mut next_request = 1u64;
    let outcome = (|| {
        while !stop.load(Ordering::SeqCst) {
            while let Ok((cmd, reply)) = requests.try_recv() {
                let command = serde_json::to_vec(&cmd).expect("command serializes");
                conn.send(&Frame::Control {
                    request_id: next_request,
                    command,
                })?;
                pending.insert(next_request, reply);
                next_request += 1;
            }
            conn.maintain()?;
            match conn.poll(Duration::from_millis(20))? {
                Some(Frame::Status { body }) => match serde_json::from_slice::<CartStatus>(&body) {
                    Ok(s) if s.cart_id == cart_id => health.heartbeat(&s),
                    Ok(s) => warn!(cart = cart_id, claimed = %s.cart_id, "ignoring status for another cart"),
                    Err(e) => warn!(cart = cart_id, error = %e, "malformed status"),
                },
                Some(Frame::ControlAck { request_id, ok, body }) => {
                    let Some(reply) = pending.remove(&request_id) else {
                        continue;
                    };
                    let result = if ok {
                        serde_json::from_slice::<CartState>(&body).map_err(|e| ControlError::Rejected {
                            cart: cart_id.to_owned(),
                            reason: format!("malformed state: {e}"),
                        })
                    } else {
                        Err(ControlError::Rejected {
                            cart: cart_id.to_owned(),
                            reason: String::from_utf8_lossy(&body).into_owned(),
                        })
                    };
                    let _ = reply.send(result);
                }
                Some(other) => debug!(cart = cart_id, frame = other.name(), "ignoring frame on control link"),
                None => {}
            }
        }
        Ok(())
    })();
    for (_, reply) in pending {
        let _ = reply.send(Err(ControlError::Offline(cart_id.to_owned())));
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use icu_core::ManualClock;

    struct Echo(Mutex<CartState>);
    impl CartLink for Echo {
        fn send(&self, cmd: ControlCommand, _t: Duration) -> Result<CartState, ControlError> {
            let mut s = self.0.lock();
            if let ControlCommand::Pause = cmd {
                s.recording = icu_core::RecordingState::Paused;
            }
            Ok(*s)
        }
    }

    #[test]
    fn offline_cart_fails_fast() {
        let clock = ManualClock::new(0);
        let health = Arc::new(HealthRegistry::new(Arc::new(clock.clone())));
        let hub = ControlHub::new(health.clone());
        assert_eq!(hub.send("c1", ControlCommand::Start, CONTROL_TIMEOUT), Err(ControlError::Offline("c1".into())));

        let token = hub.attach("c1", Arc::new(Echo(Mutex::new(CartState::default()))));
        // attached but silent: still offline
        assert!(matches!(hub.send("c1", ControlCommand::Pause, CONTROL_TIMEOUT), Err(ControlError::Offline(_))));
        health.record_ingest("c1", "s", icu_core::Modality::Noise, "r1");
        let s = hub.send("c1", ControlCommand::Pause, CONTROL_TIMEOUT).unwrap();
        assert_eq!(s.recording, icu_core::RecordingState::Paused);
        assert_eq!(health.cart("c1").unwrap().cart_state, Some(s));

        hub.detach("c1", token + 1);
        assert!(hub.is_attached("c1"));
        hub.detach("c1", token);
        assert!(!hub.is_attached("c1"));
    }
}
