use serde::{Deserialize, Serialize};

pub const PAN_RANGE: (f64, f64) = (-180.0, 180.0);
pub const TILT_RANGE: (f64, f64) = (-90.0, 90.0);
pub const ZOOM_RANGE: (f64, f64) = (1.0, 10.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum RecordingState {
    Recording,
    Paused,
    #[default]
    Stopped,
}

/// Recording state and camera orientation of one cart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartState {
    pub recording: RecordingState,
    pub pan_deg: f64,
    pub tilt_deg: f64,
    pub zoom: f64,
}

impl Default for CartState {
    fn default() -> Self {
        Self {
            recording: RecordingState::Stopped,
            pan_deg: 0.0,
            tilt_deg: 0.0,
            zoom: 1.0,
        }
    }
}

impl CartState {
    pub fn is_recording(&self) -> bool {
        self.recording == RecordingState::Recording
    }

    pub fn in_bounds(&self) -> bool {
        (PAN_RANGE.0..=PAN_RANGE.1).contains(&self.pan_deg)
            && (TILT_RANGE.0..=TILT_RANGE.1).contains(&self.tilt_deg)
            && (ZOOM_RANGE.0..=ZOOM_RANGE.1).contains(&self.zoom)
    }
}

/// Operator commands accepted by a cart. Orientation commands carry deltas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "delta")]
pub enum ControlCommand {
    Start,
    Stop,
    Pause,
    Pan(f64),
    Tilt(f64),
    Zoom(f64),
}

/// Snapshot a cart reports to the server on its control link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartStatus {
    pub cart_id: String,
    pub room_id: String,
    pub state: CartState,
    pub sensors: Vec<SensorStatus>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorStatus {
    pub sensor_id: String,
    pub modality: crate::Modality,
    pub last_capture_ts: Option<crate::TimestampMs>,
    pub pending: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_json_shape() {
        let pan: ControlCommand = serde_json::from_str(r#"{"command":"Pan","delta":30}"#).unwrap();
        assert_eq!(pan, ControlCommand::Pan(30.0));
        let pause: ControlCommand = serde_json::from_str(r#"{"command":"Pause"}"#).unwrap();
        assert_eq!(pause, ControlCommand::Pause);
        assert_eq!(serde_json::to_string(&ControlCommand::Stop).unwrap(), r#"{"command":"Stop"}"#);
    }
}
