//! The record envelope and its canonical binary encoding.
//!
//! Layout (version 1, all integers big-endian):
//!
//! ```text
//! u8        version = 0x01
//! str16     cart_id            (u16 length, UTF-8 bytes, length >= 1)
//! str16     sensor_id
//! u64       seq
//! i64       capture_ts         (UTC milliseconds)
//! str16     room_id
//! u8        modality code      (1..=6)
//! str16     codec_id
//! str16     key_id
//! u8 + n    nonce
//! u32 + n   payload
//! [u8; 32]  payload_hash       (SHA-256 of the plaintext payload)
//! ```
//!
//! Decoding rejects trailing bytes, so every value has exactly one encoding.

use std::fmt;

use crate::{Modality, TimestampMs};

pub const ENVELOPE_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub cart_id: String,
    pub sensor_id: String,
    pub seq: u64,
}

impl RecordKey {
    pub fn new(cart_id: impl Into<String>, sensor_id: impl Into<String>, seq: u64) -> Self {
        Self {
            cart_id: cart_id.into(),
            sensor_id: sensor_id.into(),
            seq,
        }
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.cart_id, self.sensor_id, self.seq)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CipherInfo {
    pub key_id: String,
    pub nonce: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordEnvelope {
    pub key: RecordKey,
    pub capture_ts: TimestampMs,
    pub room_id: String,
    pub modality: Modality,
    pub codec_id: String,
    pub cipher: CipherInfo,
    pub payload: Vec<u8>,
    pub payload_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvelopeError {
    #[error("field `{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("field `{field}` is {len} bytes, limit is {limit}")]
    TooLong {
        field: &'static str,
        len: usize,
        limit: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("input truncated while reading {0}")]
    Truncated(&'static str),
    #[error("unsupported envelope version {0}")]
    Version(u8),
    #[error("field `{0}` is not valid UTF-8")]
    Utf8(&'static str),
    #[error("unknown modality code {0}")]
    Modality(u8),
    #[error("{0} trailing bytes after envelope")]
    Trailing(usize),
    #[error(transparent)]
    Invalid(#[from] EnvelopeError),
}

impl RecordEnvelope {
    /// Validates the identifier and size invariants.
    pub fn validate(&self) -> Result<(), EnvelopeError> {
        for (name, value) in [
            ("cart_id", &self.key.cart_id),
            ("sensor_id", &self.key.sensor_id),
            ("room_id", &self.room_id),
            ("codec_id", &self.codec_id),
            ("key_id", &self.cipher.key_id),
        ] {
            if value.is_empty() {
                return Err(EnvelopeError::EmptyField(name));
            }
            if value.len() > u16::MAX as usize {
                return Err(EnvelopeError::TooLong {
                    field: name,
                    len: value.len(),
                    limit: u16::MAX as usize,
                });
            }
        }
        if self.cipher.nonce.len() > u8::MAX as usize {
            return Err(EnvelopeError::TooLong {
                field: "nonce",
                len: self.cipher.nonce.len(),
                limit: u8::MAX as usize,
            });
        }
        if self.payload.len() > u32::MAX as usize {
            return Err(EnvelopeError::TooLong {
                field: "payload",
                len: self.payload.len(),
                limit: u32::MAX as usize,
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, EnvelopeError> {
        self.validate()?;
        let mut out = Vec::with_capacity(96 + self.payload.len());
        out.push(ENVELOPE_VERSION);
        put_str(&mut out, &self.key.cart_id);
        put_str(&mut out, &self.key.sensor_id);
        out.extend_from_slice(&self.key.seq.to_be_bytes());
        out.extend_from_slice(&self.capture_ts.to_be_bytes());
        put_str(&mut out, &self.room_id);
        out.push(self.modality.code());
        put_str(&mut out, &self.codec_id);
        put_str(&mut out, &self.cipher.key_id);
        out.push(self.cipher.nonce.len() as u8);
        out.extend_from_slice(&self.cipher.nonce);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.payload_hash);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader { buf: bytes };
        let version = r.u8("version")?;
        if version != ENVELOPE_VERSION {
            return Err(DecodeError::Version(version));
        }
        let cart_id = r.str16("cart_id")?;
        let sensor_id = r.str16("sensor_id")?;
        let seq = u64::from_be_bytes(r.array("seq")?);
        let capture_ts = i64::from_be_bytes(r.array("capture_ts")?);
        let room_id = r.str16("room_id")?;
        let code = r.u8("modality")?;
        let modality = Modality::from_code(code).ok_or(DecodeError::Modality(code))?;
        let codec_id = r.str16("codec_id")?;
        let key_id = r.str16("key_id")?;
        let nonce_len = r.u8("nonce length")? as usize;
        let nonce = r.take(nonce_len, "nonce")?.to_vec();
        let payload_len = u32::from_be_bytes(r.array("payload length")?) as usize;
        let payload = r.take(payload_len, "payload")?.to_vec();
        let payload_hash = r.array::<32>("payload_hash")?;
        if !r.buf.is_empty() {
            return Err(DecodeError::Trailing(r.buf.len()));
        }
        let env = RecordEnvelope {
            key: RecordKey {
                cart_id,
                sensor_id,
                seq,
            },
            capture_ts,
            room_id,
            modality,
            codec_id,
            cipher: CipherInfo { key_id, nonce },
            payload,
            payload_hash,
        };
        env.validate()?;
        Ok(env)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }

    fn str16(&mut self, what: &'static str) -> Result<String, DecodeError> {
        let len = u16::from_be_bytes(self.array(what)?) as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| DecodeError::Utf8(what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> RecordEnvelope {
        RecordEnvelope {
            key: RecordKey::new("c1", "depth0", 7),
            capture_ts: 1_700_000_000_123,
            room_id: "r12".into(),
            modality: Modality::DepthFrame,
            codec_id: "deflate".into(),
            cipher: CipherInfo {
                key_id: "c1-k1".into(),
                nonce: vec![9; 24],
            },
            payload: vec![1, 2, 3, 4],
            payload_hash: [0xab; 32],
        }
    }

    #[test]
    fn round_trips() {
        let env = sample();
        let bytes = env.encode().unwrap();
        assert_eq!(RecordEnvelope::decode(&bytes).unwrap(), env);
    }

    #[test]
    fn empty_identifier_rejected() {
        let mut env = sample();
        env.payload = vec![0x42];
        env.room_id.clear();
        assert_eq!(env.encode(), Err(EnvelopeError::EmptyField("room_id")));
    }

    #[test]
    fn truncation_is_an_error_at_every_length() {
        let bytes = sample().encode().unwrap();
        for n in 0..bytes.len() {
            assert!(RecordEnvelope::decode(&bytes[..n]).is_err(), "prefix {n}");
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().encode().unwrap();
        bytes.push(0);
        assert_eq!(RecordEnvelope::decode(&bytes), Err(DecodeError::Trailing(1)));
    }

    fn arb_id() -> impl Strategy<Value = String> {
        "[a-z0-9_-]{1,12}"
    }

    prop_compose! {
        fn arb_envelope()(
            cart in arb_id(), sensor in arb_id(), room in arb_id(), codec in arb_id(), key_id in arb_id(),
            seq in any::<u64>(), ts in any::<i64>(), m in 0usize..6,
            nonce in proptest::collection::vec(any::<u8>(), 0..32),
            payload in proptest::collection::vec(any::<u8>(), 0..256),
            hash in any::<[u8; 32]>(),
        ) -> RecordEnvelope {
            RecordEnvelope {
                key: RecordKey::new(cart, sensor, seq),
                capture_ts: ts,
                room_id: room,
                modality: Modality::ALL[m],
                codec_id: codec,
                cipher: CipherInfo { key_id, nonce },
                payload,
                payload_hash: hash,
            }
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(env in arb_envelope()) {
            let bytes = env.encode().unwrap();
            prop_assert_eq!(RecordEnvelope::decode(&bytes).unwrap(), env);
        }

        // Mutated encodings either fail cleanly or decode to a value whose
        // re-encoding is byte-identical to the input (canonical form).
        #[test]
        fn mutated_bytes_never_panic(
            env in arb_envelope(),
            flips in proptest::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..4),
            cut in any::<prop::sample::Index>(),
        ) {
            let mut bytes = env.encode().unwrap();
            for (idx, val) in flips {
                let i = idx.index(bytes.len());
                bytes[i] = val;
            }
            let len = bytes.len();
            bytes.truncate(len - cut.index(4).min(len));
            if let Ok(decoded) = RecordEnvelope::decode(&bytes) {
                prop_assert_eq!(decoded.encode().unwrap(), bytes);
            }
        }
    }
}
