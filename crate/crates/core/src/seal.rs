//! Payload sealing: lossless compression followed by authenticated encryption.
//!
//! Sealed payloads use XChaCha20-Poly1305 with the codec id as associated
//! data. Nonces are derived from the record key, which is unique per cart, so
//! the same key never sees a repeated nonce and cart output stays
//! reproducible.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use sha2::{Digest, Sha256};

use crate::envelope::{CipherInfo, RecordEnvelope, RecordKey};

pub const NONCE_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Codec {
    /// No compression.
    Raw,
    /// DEFLATE (RFC 1951), level 6.
    Deflate,
}

impl Codec {
    pub fn id(self) -> &'static str {
        match self {
            Codec::Raw => "raw",
            Codec::Deflate => "deflate",
        }
    }

    pub fn compress(self, plain: &[u8]) -> Vec<u8> {
        match self {
            Codec::Raw => plain.to_vec(),
            Codec::Deflate => {
                let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(6));
                enc.write_all(plain).expect("writing to a Vec cannot fail");
                enc.finish().expect("writing to a Vec cannot fail")
            }
        }
    }

    pub fn decompress(self, data: &[u8]) -> Result<Vec<u8>, SealError> {
        match self {
            Codec::Raw => Ok(data.to_vec()),
            Codec::Deflate => {
                let mut out = Vec::new();
                DeflateDecoder::new(data)
                    .read_to_end(&mut out)
                    .map_err(|_| SealError::Decompress)?;
                Ok(out)
            }
        }
    }
}

impl FromStr for Codec {
    type Err = SealError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Codec::Raw),
            "deflate" => Ok(Codec::Deflate),
            other => Err(SealError::UnknownCodec(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SealError {
    #[error("unknown codec `{0}`")]
    UnknownCodec(String),
    #[error("no key for key id `{0}`")]
    UnknownKey(String),
    #[error("nonce must be {NONCE_LEN} bytes, got {0}")]
    NonceLength(usize),
    #[error("payload failed authentication")]
    Authentication,
    #[error("payload failed to decompress")]
    Decompress,
    #[error("payload hash mismatch after unseal")]
    HashMismatch,
    #[error("invalid key material: {0}")]
    KeyMaterial(String),
}

/// A cart's symmetric payload key.
#[derive(Clone, PartialEq, Eq)]
pub struct CartKey {
    pub key_id: String,
    bytes: [u8; 32],
}

impl fmt::Debug for CartKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CartKey")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

impl CartKey {
    pub fn new(key_id: impl Into<String>, bytes: [u8; 32]) -> Self {
        Self {
            key_id: key_id.into(),
            bytes,
        }
    }

    /// Parses `<key_id> <64 hex chars>`.
    pub fn parse_line(line: &str) -> Result<Self, SealError> {
        let mut parts = line.split_whitespace();
        let (Some(id), Some(hex_key), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(SealError::KeyMaterial(
                "expected `<key_id> <hex key>`".into(),
            ));
        };
        let raw = hex::decode(hex_key).map_err(|e| SealError::KeyMaterial(e.to_string()))?;
        let bytes: [u8; 32] = raw
            .try_into()
            .map_err(|_| SealError::KeyMaterial("key must be 32 bytes".into()))?;
        Ok(Self::new(id, bytes))
    }

    pub fn to_line(&self) -> String {
        format!("{} {}", self.key_id, hex::encode(self.bytes))
    }

    fn cipher(&self) -> XChaCha20Poly1305 {
        XChaCha20Poly1305::new((&self.bytes).into())
    }
}

/// Key lookup by key id, as held by the server.
#[derive(Clone, Debug, Default)]
pub struct Keyring {
    keys: HashMap<String, CartKey>,
}

impl Keyring {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: CartKey) {
        self.keys.insert(key.key_id.clone(), key);
    }

    pub fn get(&self, key_id: &str) -> Option<&CartKey> {
        self.keys.get(key_id)
    }

    /// Parses one `<key_id> <hex>` entry per non-empty, non-`#` line.
    pub fn parse(text: &str) -> Result<Self, SealError> {
        let mut ring = Keyring::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            ring.insert(CartKey::parse_line(line)?);
        }
        Ok(ring)
    }
}

impl FromIterator<CartKey> for Keyring {
    fn from_iter<I: IntoIterator<Item = CartKey>>(iter: I) -> Self {
        let mut ring = Keyring::new();
        for k in iter {
            ring.insert(k);
        }
        ring
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sealed {
    pub payload: Vec<u8>,
    pub payload_hash: [u8; 32],
    pub cipher: CipherInfo,
}

pub fn payload_digest(plain: &[u8]) -> [u8; 32] {
    Sha256::digest(plain).into()
}

/// Deterministic per-record nonce.
pub fn nonce_for(key: &RecordKey) -> [u8; NONCE_LEN] {
    let mut h = Sha256::new();
    h.update(b"icu-envelope-nonce\0");
    h.update(key.cart_id.as_bytes());
    h.update([0]);
    h.update(key.sensor_id.as_bytes());
    h.update([0]);
    h.update(key.seq.to_be_bytes());
    let digest = h.finalize();
    digest[..NONCE_LEN].try_into().unwrap()
}

pub fn seal_payload(
    plain: &[u8],
    codec_id: &str,
    key: &CartKey,
    nonce: [u8; NONCE_LEN],
) -> Result<Sealed, SealError> {
    let codec: Codec = codec_id.parse()?;
    let compressed = codec.compress(plain);
    let payload = key
        .cipher()
        .encrypt(
            XNonce::from_slice(&nonce),
            Payload {
                msg: &compressed,
                aad: codec_id.as_bytes(),
            },
        )
        .map_err(|_| SealError::Authentication)?;
    Ok(Sealed {
        payload,
        payload_hash: payload_digest(plain),
        cipher: CipherInfo {
            key_id: key.key_id.clone(),
            nonce: nonce.to_vec(),
        },
    })
}

/// Decrypts, decompresses and verifies the payload hash of `env`.
pub fn unseal_payload(env: &RecordEnvelope, keys: &Keyring) -> Result<Vec<u8>, SealError> {
    let codec: Codec = env.codec_id.parse()?;
    let key = keys
        .get(&env.cipher.key_id)
        .ok_or_else(|| SealError::UnknownKey(env.cipher.key_id.clone()))?;
    if env.cipher.nonce.len() != NONCE_LEN {
        return Err(SealError::NonceLength(env.cipher.nonce.len()));
    }
    let compressed = key
        .cipher()
        .decrypt(
            XNonce::from_slice(&env.cipher.nonce),
            Payload {
                msg: &env.payload,
                aad: env.codec_id.as_bytes(),
            },
        )
        .map_err(|_| SealError::Authentication)?;
    let plain = codec.decompress(&compressed)?;
    if payload_digest(&plain) != env.payload_hash {
        return Err(SealError::HashMismatch);
    }
    Ok(plain)
}
