//! PHI scrubbing and patient-session slicing.

use std::collections::{BTreeMap, HashMap};

use icu_core::{CipherInfo, Modality, PatientSession, RecordEnvelope, RecordKey, TimestampMs};

/// Sessions indexed by room for `(room_id, time) → session` lookups.
#[derive(Clone, Debug, Default)]
pub struct SessionMap {
    by_room: HashMap<String, Vec<PatientSession>>,
}

impl SessionMap {
    /// Sessions are assumed valid (see `validate_sessions`).
    pub fn new(sessions: &[PatientSession]) -> Self {
        let mut by_room: HashMap<String, Vec<PatientSession>> = HashMap::new();
        for s in sessions {
            by_room.entry(s.room_id.clone()).or_default().push(s.clone());
        }
        for list in by_room.values_mut() {
            list.sort_by_key(|s| s.admission_ts);
        }
        Self { by_room }
    }

    pub fn is_empty(&self) -> bool {
        self.by_room.is_empty()
    }

    /// The session with `admission_ts ≤ ts < discharge_ts` in `room_id`.
    pub fn find(&self, room_id: &str, ts: TimestampMs) -> Option<&PatientSession> {
        let list = self.by_room.get(room_id)?;
        let idx = list.partition_point(|s| s.admission_ts <= ts);
        let s = list.get(idx.checked_sub(1)?)?;
        s.contains(ts).then_some(s)
    }
}

/// A record after scrubbing: the only patient reference is the study id.
/// There is no free-text field, so operator comments cannot survive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScrubbedRecord {
    pub key: RecordKey,
    pub capture_ts: TimestampMs,
    pub room_id: String,
    pub modality: Modality,
    pub study_id: String,
    pub plain: Vec<u8>,
    pub payload_hash: [u8; 32],
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("no session covers room {room_id} at {capture_ts}")]
pub struct NoSession {
    pub room_id: String,
    pub capture_ts: TimestampMs,
}

impl ScrubbedRecord {
    /// The at-rest envelope: plaintext payload, codec `raw`, no key.
    pub fn to_envelope(&self) -> RecordEnvelope {
        plain_envelope(&self.key, self.capture_ts, &self.room_id, self.modality, &self.plain, self.payload_hash)
    }
}

pub fn plain_envelope(
    key: &RecordKey,
    capture_ts: TimestampMs,
    room_id: &str,
    modality: Modality,
    plain: &[u8],
    payload_hash: [u8; 32],
) -> RecordEnvelope {
    RecordEnvelope {
        key: key.clone(),
        capture_ts,
        room_id: room_id.to_owned(),
        modality,
        codec_id: icu_core::layout::PLAIN_CODEC.to_owned(),
        cipher: CipherInfo {
            key_id: icu_core::layout::PLAIN_KEY_ID.to_owned(),
            nonce: Vec::new(),
        },
        payload: plain.to_vec(),
        payload_hash,
    }
}

/// Attaches the study id of the session covering the record. `plain` is the
/// unsealed payload of `env`.
pub fn scrub_phi(env: &RecordEnvelope, plain: &[u8], sessions: &SessionMap) -> Result<ScrubbedRecord, NoSession> {
    let session = sessions.find(&env.room_id, env.capture_ts).ok_or_else(|| NoSession {
        room_id: env.room_id.clone(),
        capture_ts: env.capture_ts,
    })?;
    Ok(ScrubbedRecord {
        key: env.key.clone(),
        capture_ts: env.capture_ts,
        room_id: env.room_id.clone(),
        modality: env.modality,
        study_id: session.study_id.clone(),
        plain: plain.to_vec(),
        payload_hash: env.payload_hash,
    })
}

/// Anything with a room and a capture time.
pub trait Located {
    fn room_id(&self) -> &str;
    fn capture_ts(&self) -> TimestampMs;
}

impl Located for RecordEnvelope {
    fn room_id(&self) -> &str {
        &self.room_id
    }
    fn capture_ts(&self) -> TimestampMs {
        self.capture_ts
    }
}

#[derive(Debug)]
pub struct Slices<R> {
    pub partitions: BTreeMap<String, Vec<R>>,
    pub quarantined: Vec<R>,
}

/// Partitions records by covering session; uncovered records are
/// quarantined. Input order is kept within each partition.
pub fn slice_sessions<R: Located>(records: Vec<R>, sessions: &[PatientSession]) -> Slices<R> {
    let map = SessionMap::new(sessions);
    let mut partitions: BTreeMap<String, Vec<R>> = BTreeMap::new();
    let mut quarantined = Vec::new();
    for r in records {
        match map.find(r.room_id(), r.capture_ts()) {
            Some(s) => partitions.entry(s.study_id.clone()).or_default().push(r),
            None => quarantined.push(r),
        }
    }
    Slices { partitions, quarantined }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(study: &str, room: &str, a: i64, d: i64) -> PatientSession {
        PatientSession {
            patient_id: format!("MRN-{study}"),
            study_id: study.into(),
            room_id: room.into(),
            cart_id: "c1".into(),
            admission_ts: a,
            discharge_ts: d,
        }
    }

    struct Rec(&'static str, i64);
    impl Located for Rec {
        fn room_id(&self) -> &str {
            self.0
        }
        fn capture_ts(&self) -> i64 {
            self.1
        }
    }

    #[test]
    fn lookup_boundaries() {
        let m = SessionMap::new(&[session("b", "r1", 100, 200), session("a", "r1", 0, 100), session("c", "r2", 50, 60)]);
        assert_eq!(m.find("r1", 0).unwrap().study_id, "a");
        assert_eq!(m.find("r1", 99).unwrap().study_id, "a");
        assert_eq!(m.find("r1", 100).unwrap().study_id, "b");
        assert!(m.find("r1", 200).is_none());
        assert!(m.find("r1", -1).is_none());
        assert!(m.find("r2", 70).is_none());
        assert!(m.find("r3", 55).is_none());
    }

    #[test]
    fn slicing_partitions_and_quarantines() {
        let sessions = [session("a", "r1", 0, 100), session("b", "r1", 100, 200)];
        let s = slice_sessions(vec![Rec("r1", 0), Rec("r1", 100), Rec("r1", 199), Rec("r1", 200), Rec("r9", 5)], &sessions);
        assert_eq!(s.partitions["a"].len(), 1);
        assert_eq!(s.partitions["b"].len(), 2);
        assert_eq!(s.quarantined.len(), 2);
    }
}
