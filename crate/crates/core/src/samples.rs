//! Time-series payloads: one-second batches for wearables and single scalar
//! readings for the environmental sensors.
//!
//! Batch payload: `u32 rate_hz, u8 channels, u32 count, count × f32` (big-endian).
//! Scalar payload: a single big-endian `f32`.

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub rate_hz: u32,
    pub channels: u8,
    /// Interleaved by channel; `values.len() == rate_hz * channels` for a full second.
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SampleError {
    #[error("malformed sample payload: {0}")]
    Malformed(&'static str),
}

impl SampleBatch {
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.values.len() * 4);
        out.extend_from_slice(&self.rate_hz.to_be_bytes());
        out.push(self.channels);
        out.extend_from_slice(&(self.values.len() as u32).to_be_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, SampleError> {
        if bytes.len() < 9 {
            return Err(SampleError::Malformed("short header"));
        }
        let rate_hz = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let channels = bytes[4];
        let count = u32::from_be_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = &bytes[9..];
        if body.len() != count * 4 {
            return Err(SampleError::Malformed("value count mismatch"));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            rate_hz,
            channels,
            values,
        })
    }
}

pub fn scalar_payload(value: f32) -> Vec<u8> {
    value.to_be_bytes().to_vec()
}

pub fn scalar_from_payload(bytes: &[u8]) -> Result<f32, SampleError> {
    let arr: [u8; 4] = bytes
        .try_into()
        .map_err(|_| SampleError::Malformed("scalar payload must be 4 bytes"))?;
    Ok(f32::from_be_bytes(arr))
}
