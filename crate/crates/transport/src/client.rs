//! Remote publisher and consumer endpoints speaking the wire protocol.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rustls::ClientConfig;
use tracing::debug;

use crate::broker::Delivery;
use crate::channel::{BatchOutcome, ChannelError, OutgoingMessage, PublishChannel};
use crate::conn::{Conn, ConnError, PeerRole};
use crate::tls::{Credentials, TlsError};
use crate::wire::Frame;
use crate::{DeliverySource, TransportError};

const CONFIRM_TIMEOUT: Duration = Duration::from_secs(5);
const PIPELINE: usize = 64;

#[derive(Clone)]
pub struct Endpoint {
    pub addr: SocketAddr,
    pub server_identity: String,
    creds: Credentials,
    cfg: Arc<ClientConfig>,
}

impl Endpoint {
    pub fn new(addr: SocketAddr, server_identity: impl Into<String>, creds: Credentials) -> Result<Self, TlsError> {
        let cfg = creds.client_config()?;
        Ok(Self {
            addr,
            server_identity: server_identity.into(),
            creds,
            cfg,
        })
    }

    pub fn identity(&self) -> &str {
        &self.creds.identity
    }

    pub fn connect(&self, role: PeerRole) -> Result<Conn, ConnError> {
        Conn::connect(self.addr, &self.creds, self.cfg.clone(), &self.server_identity, role)
    }
}

/// Publisher that (re)connects lazily and waits for broker confirms.
pub struct TcpPublisher {
    endpoint: Endpoint,
    conn: Option<Conn>,
    published: u64,
}

impl TcpPublisher {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            conn: None,
            published: 0,
        }
    }

    fn connection(&mut self) -> Result<&mut Conn, ChannelError> {
        if self.conn.is_none() {
            let conn = self
                .endpoint
                .connect(PeerRole::Publisher)
                .map_err(|e| ChannelError::Disconnected(e.to_string()))?;
            self.conn = Some(conn);
            self.published = 0;
        }
        Ok(self.conn.as_mut().unwrap())
    }

    fn fail(&mut self, confirmed: usize, e: ConnError) -> BatchOutcome {
        debug!(error = %e, confirmed, "publisher connection failed");
        if let Some(mut c) = self.conn.take() {
            c.shutdown();
        }
        BatchOutcome {
            confirmed,
            error: Some(match e {
                ConnError::Remote { message, .. } => ChannelError::Refused(message),
                other => ChannelError::Disconnected(other.to_string()),
            }),
        }
    }
}

impl PublishChannel for TcpPublisher {
    fn publish_batch(&mut self, msgs: &[OutgoingMessage<'_>]) -> BatchOutcome {
        if msgs.is_empty() {
            return BatchOutcome::complete(0);
        }
        if let Err(e) = self.connection() {
            return BatchOutcome {
                confirmed: 0,
                error: Some(e),
            };
        }
        let base = self.published;
        let mut sent = 0usize;
        let mut confirmed = 0usize;
        let mut inflight: VecDeque<u64> = VecDeque::new();
        while confirmed < msgs.len() {
            while sent < msgs.len() && inflight.len() < PIPELINE {
                let m = msgs[sent];
                let conn = self.conn.as_mut().unwrap();
                if let Err(e) = conn.send(&Frame::Publish {
                    routing_key: m.routing_key.to_owned(),
                    envelope: m.envelope.to_vec(),
                }) {
                    return self.fail(confirmed, e);
                }
                sent += 1;
                inflight.push_back(base + sent as u64);
            }
            let conn = self.conn.as_mut().unwrap();
            match conn.recv(CONFIRM_TIMEOUT) {
                Ok(Frame::Ack { tag }) if inflight.front() == Some(&tag) => {
                    inflight.pop_front();
                    confirmed += 1;
                    self.published = tag;
                }
                Ok(Frame::Error { code, message }) => {
                    return self.fail(confirmed, ConnError::Remote { code, message })
                }
                Ok(other) => {
                    return self.fail(
                        confirmed,
                        ConnError::Handshake(format!("unexpected {} while awaiting confirm", other.name())),
                    )
                }
                Err(e) => return self.fail(confirmed, e),
            }
        }
        BatchOutcome::complete(confirmed)
    }
}

/// A consumer subscribed to one queue on a remote broker.
pub struct TcpConsumer {
    conn: Conn,
}

impl TcpConsumer {
    pub fn subscribe(endpoint: &Endpoint, queue: &str, prefetch: u16) -> Result<Self, ConnError> {
        let mut conn = endpoint.connect(PeerRole::Consumer)?;
        conn.send(&Frame::Subscribe {
            queue: queue.to_owned(),
            prefetch,
        })?;
        Ok(Self { conn })
    }
}

impl DeliverySource for TcpConsumer {
    fn next_delivery(&mut self, timeout: Duration) -> Result<Option<Delivery>, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            self.conn.maintain()?;
            let wait = deadline.saturating_duration_since(Instant::now());
            match self.conn.poll(wait.min(Duration::from_millis(250)))? {
                Some(Frame::Deliver {
                    tag,
                    redelivered,
                    envelope,
                }) => {
                    return Ok(Some(Delivery {
                        queue: String::new(),
                        tag,
                        redelivered,
                        envelope,
                    }))
                }
                Some(Frame::Heartbeat) | None => {}
                Some(Frame::Error { code, message }) => {
                    return Err(ConnError::Remote { code, message }.into())
                }
                Some(other) => {
                    return Err(TransportError::Protocol(format!("unexpected {}", other.name())))
                }
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
        }
    }

    fn ack(&mut self, tag: u64) -> Result<(), TransportError> {
        Ok(self.conn.send(&Frame::Ack { tag })?)
    }

    fn reject(&mut self, tag: u64, requeue: bool) -> Result<(), TransportError> {
        Ok(self.conn.send(&Frame::Reject { tag, requeue })?)
    }
}
