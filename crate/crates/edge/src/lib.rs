//! The cart agent.
//!
//! Synthetic sensors ([`sim`]) produce raw payloads that are tagged and
//! sealed ([`tagging`]), made durable in a per-sensor [`outbox`], and drained
//! to the broker by the [`publisher`] with capped exponential [`backoff`].
//! [`agent`] ties these together; [`runner`] drives them in real time.

pub mod agent;
pub mod backoff;
pub mod config;
pub mod control;
pub mod outbox;
pub mod publisher;
pub mod runner;
pub mod sim;
pub mod tagging;

pub use agent::{AgentError, CartAgent, CartIdentity, CartStatus, Produced, SensorBacklog, SensorProducer};
pub use backoff::Backoff;
pub use config::{CartConfig, ConfigError, LinkConfig};
pub use control::apply_control;
pub use outbox::{EntryStatus, Outbox, OutboxConfig, OutboxEntry, OutboxError};
pub use publisher::{Partition, PublishReport, Publisher};
pub use runner::{inject_fault, Fault};
pub use sim::{generate_tick, Scenario, Schedule, SensorSimConfig};
pub use tagging::{TagError, TaggedRecord, Tagger};
