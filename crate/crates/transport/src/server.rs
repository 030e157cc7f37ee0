//! TCP front end for a [`Broker`]: one thread per authenticated connection.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rustls::ServerConfig;
use tracing::{debug, info, warn};

use crate::broker::{Broker, BrokerError, Consumer};
use crate::conn::{Conn, ConnError, PeerRole};
use crate::routing::RoutingKey;
use crate::tls::{Credentials, TlsError};
use crate::wire::{error_code, Frame};

const POLL: Duration = Duration::from_millis(10);

pub struct BrokerServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn start(bind: SocketAddr, broker: Arc<Broker>, creds: &Credentials) -> Result<Self, TlsError> {
        let cfg = creds.server_config()?;
        let listener = TcpListener::bind(bind).map_err(|source| TlsError::Io {
            path: bind.to_string().into(),
            source,
        })?;
        let addr = listener.local_addr().map_err(|source| TlsError::Io {
            path: bind.to_string().into(),
            source,
        })?;
        listener.set_nonblocking(true).map_err(|source| TlsError::Io {
            path: bind.to_string().into(),
            source,
        })?;
        let stop = Arc::new(AtomicBool::new(false));
        let identity = creds.identity.clone();
        let accept = {
            let stop = stop.clone();
            thread::Builder::new()
                .name("broker-accept".into())
                .spawn(move || accept_loop(listener, broker, cfg, identity, stop))
                .expect("spawn broker accept thread")
        };
        info!(%addr, "broker listening");
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

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

fn accept_loop(
    listener: TcpListener,
    broker: Arc<Broker>,
    cfg: Arc<ServerConfig>,
    identity: String,
    stop: Arc<AtomicBool>,
) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((sock, peer)) => {
                let broker = broker.clone();
                let cfg = cfg.clone();
                let identity = identity.clone();
                let stop = stop.clone();
                workers.push(thread::spawn(move || {
                    if let Err(e) = serve(sock, broker, cfg, &identity, &stop) {
                        debug!(%peer, error = %e, "broker connection ended");
                    }
                }));
                workers.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                warn!(error = %e, "accept failed");
                thread::sleep(POLL);
            }
        }
    }
    for w in workers {
        let _ = w.join();
    }
}

fn serve(
    sock: TcpStream,
    broker: Arc<Broker>,
    cfg: Arc<ServerConfig>,
    identity: &str,
    stop: &AtomicBool,
) -> Result<(), ConnError> {
    sock.set_nonblocking(false)?;
    let mut conn = Conn::accept(sock, cfg, identity, PeerRole::Broker)?;
    let peer = conn.peer().to_owned();
    let role = conn.peer_role();
    let mut published: u64 = 0;
    let mut consumer: Option<Consumer> = None;
    while !stop.load(Ordering::SeqCst) {
        conn.maintain()?;
        if let Some(c) = consumer.as_mut() {
            while let Some(d) = c.try_next() {
                conn.send(&Frame::Deliver {
                    tag: d.tag,
                    redelivered: d.redelivered,
                    envelope: d.envelope,
                })?;
            }
        }
        let Some(frame) = conn.poll(POLL)? else {
            continue;
        };
        match frame {
            Frame::Heartbeat => {}
            Frame::Publish {
                routing_key,
                envelope,
            } if role == PeerRole::Publisher => {
                let key: RoutingKey = match routing_key.parse() {
                    Ok(k) => k,
                    Err(e) => return refuse(&mut conn, error_code::BAD_FRAME, e.to_string()),
                };
                if key.cart_id() != peer {
                    return refuse(
                        &mut conn,
                        error_code::IDENTITY,
                        format!("{peer} may not publish to {key}"),
                    );
                }
                if let Err(e) = broker.publish(key.as_str(), &envelope) {
                    return refuse(&mut conn, error_code::STORAGE, e.to_string());
                }
                published += 1;
                conn.send(&Frame::Ack { tag: published })?;
            }
            Frame::Subscribe { queue, prefetch } if role == PeerRole::Consumer && consumer.is_none() => {
                match broker.consume(&queue, prefetch as usize) {
                    Ok(c) => consumer = Some(c),
                    Err(e) => return refuse(&mut conn, error_code::STORAGE, e.to_string()),
                }
            }
            Frame::Ack { tag } | Frame::Reject { tag, .. } if consumer.is_none() => {
                return refuse(&mut conn, error_code::UNKNOWN_TAG, format!("unknown delivery tag {tag}"));
            }
            Frame::Ack { tag } => {
                if let Err(e) = consumer.as_mut().unwrap().ack(tag) {
                    return refuse_broker(&mut conn, e);
                }
            }
            Frame::Reject { tag, requeue } => {
                if let Err(e) = consumer.as_mut().unwrap().reject(tag, requeue) {
                    return refuse_broker(&mut conn, e);
                }
            }
            other => {
                return refuse(
                    &mut conn,
                    error_code::UNEXPECTED,
                    format!("unexpected {} from {role:?}", other.name()),
                )
            }
        }
    }
    Ok(())
}

fn refuse_broker(conn: &mut Conn, e: BrokerError) -> Result<(), ConnError> {
    let code = match e {
        BrokerError::UnknownTag(_) => error_code::UNKNOWN_TAG,
        BrokerError::Io { .. } => error_code::STORAGE,
    };
    refuse(conn, code, e.to_string())
}

/// Reports a protocol error to the peer and closes the connection.
fn refuse(conn: &mut Conn, code: u16, message: String) -> Result<(), ConnError> {
    warn!(peer = conn.peer(), code, %message, "closing connection on protocol error");
    let _ = conn.send(&Frame::Error {
        code,
        message: message.clone(),
    });
    conn.shutdown();
    Err(ConnError::Remote { code, message })
}
