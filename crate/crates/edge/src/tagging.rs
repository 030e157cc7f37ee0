//! Metadata tagging and sealing: the cart-side processing stage between a raw
//! sensor payload and the outbox.

use icu_core::seal::{nonce_for, seal_payload};
use icu_core::{CartKey, Clock, Modality, RecordEnvelope, RecordKey, SealError, TimestampMs};

/// Largest backwards clock step that is absorbed by holding the previous timestamp.
pub const MAX_CLOCK_REGRESSION_MS: i64 = 1_000;

#[derive(Debug, thiserror::Error)]
pub enum TagError {
    #[error("identifier `{0}` must not be empty")]
    EmptyId(&'static str),
    #[error("clock moved back {back_ms} ms (last capture {last}, now {now})")]
    ClockRegression {
        last: TimestampMs,
        now: TimestampMs,
        back_ms: i64,
    },
    #[error(transparent)]
    Seal(#[from] SealError),
}

/// A tagged record before sealing; `plain` is the raw payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedRecord {
    pub key: RecordKey,
    pub capture_ts: TimestampMs,
    pub room_id: String,
    pub modality: Modality,
    pub plain: Vec<u8>,
}

impl TaggedRecord {
    pub fn seal(self, codec_id: &str, key: &CartKey) -> Result<RecordEnvelope, SealError> {
        let sealed = seal_payload(&self.plain, codec_id, key, nonce_for(&self.key))?;
        Ok(RecordEnvelope {
            key: self.key,
            capture_ts: self.capture_ts,
            room_id: self.room_id,
            modality: self.modality,
            codec_id: codec_id.to_owned(),
            cipher: sealed.cipher,
            payload: sealed.payload,
            payload_hash: sealed.payload_hash,
        })
    }
}

/// Per-sensor tagger. Keeps the last capture timestamp so emitted timestamps
/// never decrease.
#[derive(Debug)]
pub struct Tagger {
    cart_id: String,
    room_id: String,
    sensor_id: String,
    modality: Modality,
    last_ts: Option<TimestampMs>,
}

impl Tagger {
    pub fn new(
        cart_id: impl Into<String>,
        room_id: impl Into<String>,
        sensor_id: impl Into<String>,
        modality: Modality,
    ) -> Result<Self, TagError> {
        let (cart_id, room_id, sensor_id) = (cart_id.into(), room_id.into(), sensor_id.into());
        for (name, v) in [("cart_id", &cart_id), ("room_id", &room_id), ("sensor_id", &sensor_id)] {
            if v.is_empty() {
                return Err(TagError::EmptyId(name));
            }
        }
        Ok(Self {
            cart_id,
            room_id,
            sensor_id,
            modality,
            last_ts: None,
        })
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn last_capture_ts(&self) -> Option<TimestampMs> {
        self.last_ts
    }

    /// Restores the monotonicity floor after a restart.
    pub fn resume_after(&mut self, ts: TimestampMs) {
        self.last_ts = Some(self.last_ts.map_or(ts, |l| l.max(ts)));
    }

    /// Reads the capture time, refusing a backwards step of more than one second.
    /// Smaller steps hold the previous timestamp.
    pub fn capture_time(&self, clock: &dyn Clock) -> Result<TimestampMs, TagError> {
        let now = clock.now_ms();
        match self.last_ts {
            Some(last) if now < last - MAX_CLOCK_REGRESSION_MS => Err(TagError::ClockRegression {
                last,
                now,
                back_ms: last - now,
            }),
            Some(last) => Ok(now.max(last)),
            None => Ok(now),
        }
    }

    /// Tags `raw` with the given capture time and sequence number.
    pub fn tag(&mut self, raw: Vec<u8>, capture_ts: TimestampMs, seq: u64) -> TaggedRecord {
        debug_assert!(self.last_ts.map_or(true, |l| capture_ts >= l));
        self.last_ts = Some(capture_ts);
        TaggedRecord {
            key: RecordKey::new(&self.cart_id, &self.sensor_id, seq),
            capture_ts,
            room_id: self.room_id.clone(),
            modality: self.modality,
            plain: raw,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use icu_core::seal::unseal_payload;
    use icu_core::{Keyring, ManualClock};

    fn tagger() -> Tagger {
        Tagger::new("c1", "room-4", "rgb0", Modality::RgbFrame).unwrap()
    }

    #[test]
    fn carries_ids_time_and_seq() {
        let clock = ManualClock::new(1_700_000_000_000);
        let mut t = tagger();
        let ts = t.capture_time(&clock).unwrap();
        let r = t.tag(vec![1, 2, 3], ts, 7);
        assert_eq!(r.key, RecordKey::new("c1", "rgb0", 7));
        assert_eq!(r.capture_ts, 1_700_000_000_000);
        assert_eq!(r.room_id, "room-4");
        clock.advance(1_000);
        let ts2 = t.capture_time(&clock).unwrap();
        assert_eq!(t.tag(vec![], ts2, 8).capture_ts - r.capture_ts, 1_000);
    }

    #[test]
    fn refuses_large_clock_regression() {
        let clock = ManualClock::new(100_000);
        let mut t = tagger();
        let ts = t.capture_time(&clock).unwrap();
        t.tag(vec![], ts, 1);
        clock.advance(-5_000);
        assert!(matches!(t.capture_time(&clock), Err(TagError::ClockRegression { back_ms: 5_000, .. })));
    }

    #[test]
    fn small_regression_holds_previous_timestamp() {
        let clock = ManualClock::new(100_000);
        let mut t = tagger();
        let ts = t.capture_time(&clock).unwrap();
        t.tag(vec![], ts, 1);
        clock.advance(-400);
        assert_eq!(t.capture_time(&clock).unwrap(), 100_000);
    }

    #[test]
    fn empty_identifiers_rejected() {
        assert!(matches!(Tagger::new("", "r", "s", Modality::Emg), Err(TagError::EmptyId("cart_id"))));
        assert!(matches!(Tagger::new("c", "r", "", Modality::Emg), Err(TagError::EmptyId("sensor_id"))));
    }

    #[test]
    fn sealed_record_unseals_to_raw() {
        let key = CartKey::new("c1-k", [7; 32]);
        let mut t = tagger();
        let env = t.tag(b"frame bytes".to_vec(), 5, 1).seal("deflate", &key).unwrap();
        env.validate().unwrap();
        let ring: Keyring = [key].into_iter().collect();
        assert_eq!(unseal_payload(&env, &ring).unwrap(), b"frame bytes");
    }
}
