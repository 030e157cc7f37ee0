use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Sensor data kinds carried by a cart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    RgbFrame,
    DepthFrame,
    Accel,
    Emg,
    Noise,
    Light,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::RgbFrame,
        Modality::DepthFrame,
        Modality::Accel,
        Modality::Emg,
        Modality::Noise,
        Modality::Light,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::RgbFrame => "RGB_FRAME",
            Modality::DepthFrame => "DEPTH_FRAME",
            Modality::Accel => "ACCEL",
            Modality::Emg => "EMG",
            Modality::Noise => "NOISE",
            Modality::Light => "LIGHT",
        }
    }

    /// Wire code used by the envelope format.
    pub fn code(self) -> u8 {
        match self {
            Modality::RgbFrame => 1,
            Modality::DepthFrame => 2,
            Modality::Accel => 3,
            Modality::Emg => 4,
            Modality::Noise => 5,
            Modality::Light => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }

    /// Device sampling rate. Accelerometers run at 30 Hz (Actigraph) or
    /// 100 Hz (Shimmer); 30 Hz is the default.
    pub fn nominal_rate_hz(self) -> f64 {
        match self {
            Modality::RgbFrame | Modality::DepthFrame => 1.0,
            Modality::Accel => 30.0,
            Modality::Emg => 512.0,
            Modality::Noise | Modality::Light => 1.0,
        }
    }

    /// Whether samples are grouped into one-second batches per envelope.
    pub fn is_batched(self) -> bool {
        matches!(self, Modality::Accel | Modality::Emg)
    }

    /// Expected spacing between envelopes for this modality.
    pub fn envelope_period_ms(self) -> i64 {
        if self.is_batched() {
            1_000
        } else {
            (1_000.0 / self.nominal_rate_hz()).round() as i64
        }
    }

    pub fn is_image(self) -> bool {
        matches!(self, Modality::RgbFrame | Modality::DepthFrame)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown modality `{0}`")]
pub struct UnknownModality(pub String);

impl FromStr for Modality {
    type Err = UnknownModality;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownModality(s.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_names_round_trip() {
        for m in Modality::ALL {
            assert_eq!(Modality::from_code(m.code()), Some(m));
            assert_eq!(m.as_str().parse::<Modality>().unwrap(), m);
            assert!(m.nominal_rate_hz() > 0.0);
        }
        assert_eq!(Modality::from_code(0), None);
        assert_eq!(Modality::from_code(7), None);
    }

    #[test]
    fn batched_modalities_emit_once_per_second() {
        assert_eq!(Modality::Emg.envelope_period_ms(), 1_000);
        assert_eq!(Modality::Accel.envelope_period_ms(), 1_000);
        assert_eq!(Modality::DepthFrame.envelope_period_ms(), 1_000);
    }
}
