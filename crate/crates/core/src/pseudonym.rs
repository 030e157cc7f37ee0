//! Keyed pseudonyms: `study_id = hex(HMAC-SHA256(key, patient_id))[..16]`.

use std::fmt;
use std::path::Path;

use hmac::{Hmac, Mac};
use sha2::Sha256;

pub const STUDY_ID_HEX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PseudonymError {
    #[error("pseudonym key must be at least 16 bytes of hex, got {0} bytes")]
    TooShort(usize),
    #[error("pseudonym key is not valid hex")]
    BadHex,
    #[error("reading pseudonym key {path}: {message}")]
    Read { path: String, message: String },
}

#[derive(Clone, PartialEq, Eq)]
pub struct PseudonymKey(Vec<u8>);

impl fmt::Debug for PseudonymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PseudonymKey(..)")
    }
}

impl PseudonymKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, PseudonymError> {
        let bytes = bytes.into();
        if bytes.len() < 16 {
            return Err(PseudonymError::TooShort(bytes.len()));
        }
        Ok(Self(bytes))
    }

    pub fn from_hex(s: &str) -> Result<Self, PseudonymError> {
        Self::new(hex::decode(s.trim()).map_err(|_| PseudonymError::BadHex)?)
    }

    pub fn load(path: &Path) -> Result<Self, PseudonymError> {
        let text = std::fs::read_to_string(path).map_err(|e| PseudonymError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_hex(&text)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    pub fn study_id(&self, patient_id: &str) -> String {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(patient_id.as_bytes());
        let mut out = hex::encode(mac.finalize().into_bytes());
        out.truncate(STUDY_ID_HEX_LEN);
        out
    }
}
