//! Broker consumption: authenticate, scrub, store, then acknowledge.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use icu_core::seal::unseal_payload;
use icu_core::{ColorImage, Keyring, Modality, PatientSession, RecordEnvelope};
use icu_transport::DeliverySource;
use parking_lot::{Mutex, RwLock};
use sha2::{Digest, Sha256};
use tracing::{debug, info, warn};

use crate::curation::{plain_envelope, scrub_phi, SessionMap};
use crate::health::HealthRegistry;
use crate::preview::{PreviewFrame, PreviewHub};
use crate::store::{Location, RecordStore, StoreError, StoreOutcome};

/// Authentication or decode failures tolerated before a message is
/// quarantined as poison.
pub const MAX_ATTEMPTS: u32 = 5;

pub const NO_SESSION: &str = "no_session";
pub const POISON: &str = "poison";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IngestOutcome {
    Stored { study_id: String, path: String },
    Duplicate,
    Quarantined { reason: String },
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    /// Not acknowledged; the broker redelivers.
    #[error("rejected ({attempt}/{max}): {reason}")]
    Rejected { reason: String, attempt: u32, max: u32 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub struct Ingestor {
    store: Arc<RecordStore>,
    keys: RwLock<Keyring>,
    sessions: RwLock<SessionMap>,
    attempts: Mutex<HashMap<[u8; 32], u32>>,
    health: Option<Arc<HealthRegistry>>,
    preview: Option<Arc<PreviewHub>>,
}

impl Ingestor {
    pub fn new(store: Arc<RecordStore>, keys: Keyring, sessions: &[PatientSession]) -> Self {
        Self {
            store,
            keys: RwLock::new(keys),
            sessions: RwLock::new(SessionMap::new(sessions)),
            attempts: Mutex::new(HashMap::new()),
            health: None,
            preview: None,
        }
    }

    pub fn with_health(mut self, h: Arc<HealthRegistry>) -> Self {
        self.health = Some(h);
        self
    }

    pub fn with_preview(mut self, p: Arc<PreviewHub>) -> Self {
        self.preview = Some(p);
        self
    }

    pub fn store(&self) -> &Arc<RecordStore> {
        &self.store
    }

    pub fn set_sessions(&self, sessions: &[PatientSession]) {
        *self.sessions.write() = SessionMap::new(sessions);
    }

    pub fn set_keys(&self, keys: Keyring) {
        *self.keys.write() = keys;
    }

    fn fail(&self, bytes: &[u8], decoded: Option<&RecordEnvelope>, reason: String) -> Result<IngestOutcome, IngestError> {
        let digest: [u8; 32] = Sha256::digest(bytes).into();
        let attempt = {
            let mut a = self.attempts.lock();
            let n = a.entry(digest).or_insert(0);
            *n += 1;
            *n
        };
        if attempt < MAX_ATTEMPTS {
            debug!(attempt, %reason, "rejecting message");
            return Err(IngestError::Rejected {
                reason,
                attempt,
                max: MAX_ATTEMPTS,
            });
        }
        let loc = self.store.quarantine_poison(bytes, decoded, POISON)?;
        self.attempts.lock().remove(&digest);
        warn!(%reason, ?loc, "quarantined poison message");
        Ok(IngestOutcome::Quarantined { reason: POISON.into() })
    }

    /// Processes one delivery. `Ok` means the message may be acknowledged.
    pub fn ingest(&self, bytes: &[u8]) -> Result<IngestOutcome, IngestError> {
        let env = match RecordEnvelope::decode(bytes) {
            Ok(e) => e,
            Err(e) => return self.fail(bytes, None, format!("decode: {e}")),
        };
        let plain = match unseal_payload(&env, &self.keys.read()) {
            Ok(p) => p,
            Err(e) => return self.fail(bytes, Some(&env), format!("unseal {}: {e}", env.key)),
        };
        let scrubbed = scrub_phi(&env, &plain, &self.sessions.read());
        let (outcome, plain) = match scrubbed {
            Ok(rec) => (self.store.store(&rec)?, plain),
            Err(no) => {
                debug!(key = %env.key, error = %no, "quarantining record outside any session");
                // keep the plaintext so the record can be re-sliced later
                let q = plain_envelope(&env.key, env.capture_ts, &env.room_id, env.modality, &plain, env.payload_hash);
                (self.store.quarantine_record(&q, NO_SESSION)?, plain)
            }
        };
        self.observe(&env, &plain);
        Ok(match outcome {
            StoreOutcome::Duplicate(_) => IngestOutcome::Duplicate,
            StoreOutcome::Written(Location::Stored { study_id, path }) => IngestOutcome::Stored { study_id, path },
            StoreOutcome::Written(Location::Quarantined { reason, .. }) => IngestOutcome::Quarantined { reason },
        })
    }

    fn observe(&self, env: &RecordEnvelope, plain: &[u8]) {
        if let Some(h) = &self.health {
            h.record_ingest(&env.key.cart_id, &env.key.sensor_id, env.modality, &env.room_id);
        }
        if env.modality == Modality::RgbFrame {
            if let Some(p) = &self.preview {
                if let Ok(img) = ColorImage::from_payload(plain) {
                    p.offer(PreviewFrame::new(&env.key.cart_id, &env.key.sensor_id, env.key.seq, env.capture_ts, &img));
                }
            }
        }
    }
}

/// Counters of one consumer loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConsumeStats {
    pub stored: u64,
    pub duplicates: u64,
    pub quarantined: u64,
    pub rejected: u64,
}

/// Drains `source` until `stop` is set: acks on success, rejects with
/// requeue otherwise. Returns when the source fails so the caller can
/// reconnect.
pub fn consume(
    source: &mut dyn DeliverySource,
    ingestor: &Ingestor,
    stop: &AtomicBool,
    stats: &mut ConsumeStats,
) -> Result<(), icu_transport::TransportError> {
    while !stop.load(Ordering::SeqCst) {
        let Some(d) = source.next_delivery(Duration::from_millis(100))? else {
            continue;
        };
        match ingestor.ingest(&d.envelope) {
            Ok(o) => {
                match o {
                    IngestOutcome::Stored { .. } => stats.stored += 1,
                    IngestOutcome::Duplicate => stats.duplicates += 1,
                    IngestOutcome::Quarantined { .. } => stats.quarantined += 1,
                }
                source.ack(d.tag)?;
            }
            Err(e) => {
                stats.rejected += 1;
                if matches!(e, IngestError::Store(_)) {
                    warn!(error = %e, "storage failure; message will be redelivered");
                    std::thread::sleep(Duration::from_millis(200));
                }
                source.reject(d.tag, true)?;
            }
        }
    }
    info!(?stats, "consumer stopping");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use icu_core::seal::{nonce_for, seal_payload};
    use icu_core::{CartKey, RecordKey};

    fn key() -> CartKey {
        CartKey::new("c1", [9u8; 32])
    }

    fn sealed(seq: u64, ts: i64, room: &str) -> Vec<u8> {
        let k = RecordKey::new("c1", "noise0", seq);
        let plain = icu_core::samples::scalar_payload(42.0);
        let s = seal_payload(&plain, "deflate", &key(), nonce_for(&k)).unwrap();
        RecordEnvelope {
            key: k,
            capture_ts: ts,
            room_id: room.into(),
            modality: Modality::Noise,
            codec_id: "deflate".into(),
            cipher: s.cipher,
            payload: s.payload,
            payload_hash: s.payload_hash,
        }
        .encode()
        .unwrap()
    }

    fn setup(dir: &std::path::Path) -> Ingestor {
        let store = Arc::new(RecordStore::open(dir, false).unwrap());
        let sessions = [PatientSession {
            patient_id: "MRN-0042".into(),
            study_id: "feedfacecafebeef".into(),
            room_id: "r1".into(),
            cart_id: "c1".into(),
            admission_ts: 0,
            discharge_ts: 1_000_000,
        }];
        Ingestor::new(store, [key()].into_iter().collect(), &sessions)
    }

    #[test]
    fn stored_then_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        let ing = setup(dir.path());
        let msg = sealed(1, 10, "r1");
        assert!(matches!(ing.ingest(&msg).unwrap(), IngestOutcome::Stored { .. }));
        assert_eq!(ing.ingest(&msg).unwrap(), IngestOutcome::Duplicate);
        assert_eq!(ing.store().layout().partition("feedfacecafebeef").unwrap().len(), 1);
    }

    #[test]
    fn outside_session_is_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        let ing = setup(dir.path());
        assert_eq!(
            ing.ingest(&sealed(2, 2_000_000, "r1")).unwrap(),
            IngestOutcome::Quarantined { reason: NO_SESSION.into() }
        );
        assert_eq!(ing.ingest(&sealed(2, 2_000_000, "r1")).unwrap(), IngestOutcome::Duplicate);
    }

    #[test]
    fn tampered_message_rejected_then_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        let ing = setup(dir.path());
        let mut msg = sealed(3, 10, "r1");
        let n = msg.len();
        msg[n - 40] ^= 1; // inside the ciphertext
        for attempt in 1..MAX_ATTEMPTS {
            match ing.ingest(&msg) {
                Err(IngestError::Rejected { attempt: a, .. }) => assert_eq!(a, attempt),
                other => panic!("expected rejection, got {other:?}"),
            }
        }
        assert_eq!(ing.ingest(&msg).unwrap(), IngestOutcome::Quarantined { reason: POISON.into() });
        // the authentic copy still stores
        assert!(matches!(ing.ingest(&sealed(3, 10, "r1")).unwrap(), IngestOutcome::Stored { .. }));
        assert!(matches!(ing.ingest(b"\x07junk"), Err(IngestError::Rejected { .. })));
    }
}
