//! Cart-to-server transport: routing keys, the length-prefixed wire protocol,
//! a durable at-least-once broker, and the mutually authenticated TLS channel
//! the protocol runs over.

pub mod broker;
pub mod channel;
pub mod client;
pub mod conn;
pub mod routing;
pub mod server;
pub mod tls;
pub mod wire;

pub use broker::{Broker, BrokerConfig, BrokerError, Consumer, Delivery, QueueStats};
pub use channel::{BatchOutcome, ChannelError, InProcChannel, LinkFaults, OutgoingMessage, PublishChannel};
pub use client::{Endpoint, TcpConsumer, TcpPublisher};
pub use conn::{Conn, ConnError, PeerRole};
pub use routing::{route, RoutingKey, RoutingKeyError};
pub use server::BrokerServer;
pub use tls::{Credentials, TlsError};
pub use wire::{Frame, WireError};

use std::time::Duration;

/// Heartbeat cadence on every connection.
pub const HEARTBEAT_INTERVAL: Duration = Duration::from_secs(2);
/// Number of missed heartbeats after which the peer is declared dead.
pub const MISSED_HEARTBEATS: u32 = 3;

/// A source of broker deliveries, local or remote.
pub trait DeliverySource: Send {
    /// Waits up to `timeout` for the next delivery.
    fn next_delivery(&mut self, timeout: Duration) -> Result<Option<Delivery>, TransportError>;
    fn ack(&mut self, tag: u64) -> Result<(), TransportError>;
    /// Negative acknowledgment; with `requeue` the message is redelivered immediately.
    fn reject(&mut self, tag: u64, requeue: bool) -> Result<(), TransportError>;
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Conn(#[from] ConnError),
    #[error("protocol violation: {0}")]
    Protocol(String),
}
