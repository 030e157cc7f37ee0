use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::TimestampMs;

/// One patient's stay in a room, as reported by the clinical feed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSession {
    pub patient_id: String,
    pub study_id: String,
    pub room_id: String,
    pub cart_id: String,
    pub admission_ts: TimestampMs,
    pub discharge_ts: TimestampMs,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("session for {study_id}: admission {admission_ts} is not before discharge {discharge_ts}")]
    EmptyInterval {
        study_id: String,
        admission_ts: TimestampMs,
        discharge_ts: TimestampMs,
    },
    #[error("sessions {first} and {second} overlap in room {room_id}")]
    Overlap {
        room_id: String,
        first: String,
        second: String,
    },
}

impl PatientSession {
    /// Half-open membership: admission inclusive, discharge exclusive.
    pub fn contains(&self, ts: TimestampMs) -> bool {
        self.admission_ts <= ts && ts < self.discharge_ts
    }
}

/// Checks per-session intervals and that sessions in one room do not overlap.
pub fn validate_sessions(sessions: &[PatientSession]) -> Result<(), SessionError> {
    let mut by_room: BTreeMap<&str, Vec<&PatientSession>> = BTreeMap::new();
    for s in sessions {
        if s.admission_ts >= s.discharge_ts {
            return Err(SessionError::EmptyInterval {
                study_id: s.study_id.clone(),
                admission_ts: s.admission_ts,
                discharge_ts: s.discharge_ts,
            });
        }
        by_room.entry(&s.room_id).or_default().push(s);
    }
    for (room, mut list) in by_room {
        list.sort_by_key(|s| s.admission_ts);
        for pair in list.windows(2) {
            if pair[1].admission_ts < pair[0].discharge_ts {
                return Err(SessionError::Overlap {
                    room_id: room.to_owned(),
                    first: pair[0].study_id.clone(),
                    second: pair[1].study_id.clone(),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(study: &str, room: &str, a: i64, d: i64) -> PatientSession {
        PatientSession {
            patient_id: format!("P-{study}"),
            study_id: study.into(),
            room_id: room.into(),
            cart_id: "c1".into(),
            admission_ts: a,
            discharge_ts: d,
        }
    }

    #[test]
    fn back_to_back_sessions_are_valid() {
        assert!(validate_sessions(&[s("a", "r1", 0, 10), s("b", "r1", 10, 20)]).is_ok());
    }

    #[test]
    fn overlap_and_empty_interval_rejected() {
        assert!(matches!(
            validate_sessions(&[s("a", "r1", 0, 10), s("b", "r1", 9, 20)]),
            Err(SessionError::Overlap { .. })
        ));
        assert!(validate_sessions(&[s("a", "r1", 0, 10), s("b", "r2", 5, 20)]).is_ok());
        assert!(matches!(
            validate_sessions(&[s("a", "r1", 10, 10)]),
            Err(SessionError::EmptyInterval { .. })
        ));
    }

    #[test]
    fn boundaries_are_half_open() {
        let x = s("a", "r1", 100, 200);
        assert!(x.contains(100));
        assert!(!x.contains(200));
    }
}
