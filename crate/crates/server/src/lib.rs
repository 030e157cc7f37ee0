//! Server side of the pipeline: broker consumption, authenticated and
//! idempotent storage, PHI scrubbing and session slicing, cart health,
//! live preview, remote control and the HTTP API.

pub mod api;
pub mod control;
pub mod curation;
pub mod health;
pub mod ingest;
pub mod preview;
pub mod store;

pub use control::{CartLink, ControlError, ControlHub, ControlServer};
pub use curation::{scrub_phi, slice_sessions, ScrubbedRecord, SessionMap};
pub use health::{CartHealth, HealthRegistry, HealthState};
pub use ingest::{IngestError, IngestOutcome, Ingestor};
pub use preview::{PreviewFrame, PreviewHub};
pub use store::{Location, RecordStore, StoreError, StoreOutcome};
pub mod config;
pub mod runner;

pub use config::{BrokerMode, ConfigError, ServerConfig};
pub use runner::{start, ServerError, ServerHandle};
