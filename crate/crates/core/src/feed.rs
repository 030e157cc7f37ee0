//! Clinical feed: a line-delimited JSON file standing in for the hospital's
//! data repository.
//!
//! ```text
//! {"type":"session","patient_id":"P1","room_id":"r1","cart_id":"c1","admission_ts":0,"discharge_ts":86400000}
//! {"type":"pain","patient_id":"P1","ts":3600000,"score":6}
//! {"type":"vital","patient_id":"P1","ts":3600000,"name":"heart_rate","value":92.0}
//! ```
//!
//! Patient ids are replaced by study ids on load; only [`PatientSession`]
//! keeps the raw id, in memory, for matching.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pseudonym::PseudonymKey;
use crate::session::{validate_sessions, PatientSession, SessionError};
use crate::TimestampMs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeedLine {
    Session {
        patient_id: String,
        room_id: String,
        #[serde(default)]
        cart_id: String,
        admission_ts: TimestampMs,
        discharge_ts: TimestampMs,
    },
    Pain {
        patient_id: String,
        ts: TimestampMs,
        score: f64,
    },
    Vital {
        patient_id: String,
        ts: TimestampMs,
        name: String,
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PainEvent {
    pub study_id: String,
    pub ts: TimestampMs,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitalSample {
    pub study_id: String,
    pub ts: TimestampMs,
    pub name: String,
    pub value: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum FeedError {
    #[error("reading clinical feed: {0}")]
    Io(#[from] io::Error),
    #[error("clinical feed line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Sessions(#[from] SessionError),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClinicalFeed {
    pub sessions: Vec<PatientSession>,
    /// Sorted by (study_id, ts).
    pub pain: Vec<PainEvent>,
    /// Sorted by (study_id, ts, name).
    pub vitals: Vec<VitalSample>,
}

impl ClinicalFeed {
    pub fn parse(text: &str, key: &PseudonymKey) -> Result<Self, FeedError> {
        Self::from_reader(text.as_bytes(), key)
    }

    pub fn load(path: &Path, key: &PseudonymKey) -> Result<Self, FeedError> {
        Self::from_reader(BufReader::new(std::fs::File::open(path)?), key)
    }

    fn from_reader(r: impl BufRead, key: &PseudonymKey) -> Result<Self, FeedError> {
        let mut feed = ClinicalFeed::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: FeedLine = serde_json::from_str(&line).map_err(|e| FeedError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                FeedLine::Session {
                    patient_id,
                    room_id,
                    cart_id,
                    admission_ts,
                    discharge_ts,
                } => feed.sessions.push(PatientSession {
                    study_id: key.study_id(&patient_id),
                    patient_id,
                    room_id,
                    cart_id,
                    admission_ts,
                    discharge_ts,
                }),
                FeedLine::Pain { patient_id, ts, score } => feed.pain.push(PainEvent {
                    study_id: key.study_id(&patient_id),
                    ts,
                    score,
                }),
                FeedLine::Vital { patient_id, ts, name, value } => feed.vitals.push(VitalSample {
                    study_id: key.study_id(&patient_id),
                    ts,
                    name,
                    value,
                }),
            }
        }
        validate_sessions(&feed.sessions)?;
        feed.sessions.sort_by(|a, b| (&a.room_id, a.admission_ts).cmp(&(&b.room_id, b.admission_ts)));
        feed.pain.sort_by(|a, b| (&a.study_id, a.ts).cmp(&(&b.study_id, b.ts)));
        feed.vitals.sort_by(|a, b| (&a.study_id, a.ts, &a.name).cmp(&(&b.study_id, b.ts, &b.name)));
        Ok(feed)
    }

    pub fn session_of(&self, study_id: &str) -> Vec<&PatientSession> {
        self.sessions.iter().filter(|s| s.study_id == study_id).collect()
    }

    pub fn pain_of(&self, study_id: &str) -> Vec<TimestampMs> {
        self.pain.iter().filter(|p| p.study_id == study_id).map(|p| p.ts).collect()
    }

    /// Vitals of one study grouped by name.
    pub fn vitals_of(&self, study_id: &str) -> BTreeMap<&str, Vec<(TimestampMs, f64)>> {
        let mut m: BTreeMap<&str, Vec<(TimestampMs, f64)>> = BTreeMap::new();
        for v in self.vitals.iter().filter(|v| v.study_id == study_id) {
            m.entry(&v.name).or_default().push((v.ts, v.value));
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_pseudonymizes() {
        let key = PseudonymKey::new([1u8; 16]).unwrap();
        let text = r#"
{"type":"session","patient_id":"P9","room_id":"r1","cart_id":"c1","admission_ts":0,"discharge_ts":100}
{"type":"pain","patient_id":"P9","ts":50,"score":7}
{"type":"vital","patient_id":"P9","ts":40,"name":"hr","value":80.5}
"#;
        let f = ClinicalFeed::parse(text, &key).unwrap();
        let sid = key.study_id("P9");
        assert_eq!(f.sessions[0].study_id, sid);
        assert_eq!(f.pain_of(&sid), vec![50]);
        assert_eq!(f.vitals_of(&sid)["hr"], vec![(40, 80.5)]);
        assert!(matches!(ClinicalFeed::parse("{\"type\":\"x\"}", &key), Err(FeedError::Parse { line: 1, .. })));
    }
}
