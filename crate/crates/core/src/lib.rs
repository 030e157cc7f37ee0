//! Domain model shared by the cart agent, broker, server and batch tools.
//!
//! The [`envelope`] module defines the canonical binary record format used on
//! the wire and at rest. [`seal`] handles compression and authenticated
//! encryption of payloads, and [`counter`] provides crash-safe per-sensor
//! sequence numbers.

pub mod au;
pub mod clock;
pub mod counter;
pub mod envelope;
pub mod feed;
pub mod image;
pub mod layout;
pub mod modality;
pub mod pseudonym;
pub mod samples;
pub mod seal;
pub mod session;
pub mod state;

pub use au::ActionUnit;
pub use clock::{Clock, ManualClock, OffsetClock, SystemClock};
pub use counter::{CounterError, SeqCounter};
pub use envelope::{CipherInfo, DecodeError, EnvelopeError, RecordEnvelope, RecordKey};
pub use layout::{ManifestEntry, StorageLayout};
pub use image::{ColorImage, DepthFrame, FrameError, GrayImage};
pub use modality::Modality;
pub use feed::{ClinicalFeed, FeedError, PainEvent, VitalSample};
pub use pseudonym::{PseudonymError, PseudonymKey};
pub use seal::{CartKey, Codec, Keyring, SealError, Sealed};
pub use session::{PatientSession, SessionError};
pub use state::{CartState, CartStatus, SensorStatus, ControlCommand, RecordingState};

/// UTC milliseconds since the Unix epoch.
pub type TimestampMs = i64;

pub const MS_PER_SECOND: i64 = 1_000;
pub const MS_PER_HOUR: i64 = 3_600_000;
pub const MS_PER_DAY: i64 = 86_400_000;
