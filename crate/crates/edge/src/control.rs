use icu_core::state::{PAN_RANGE, TILT_RANGE, ZOOM_RANGE};
use icu_core::{CartState, ControlCommand, RecordingState};
use tracing::warn;

/// Applies one operator command. Invalid recording transitions leave the
/// state unchanged; orientation deltas are clamped to the camera's range.
pub fn apply_control(state: CartState, cmd: ControlCommand) -> CartState {
    use RecordingState::*;
    let mut next = state;
    match cmd {
        ControlCommand::Start => match state.recording {
            Stopped | Paused => next.recording = Recording,
            Recording => warn!(?cmd, from = ?state.recording, "ignoring invalid transition"),
        },
        ControlCommand::Pause => match state.recording {
            Recording => next.recording = Paused,
            _ => warn!(?cmd, from = ?state.recording, "ignoring invalid transition"),
        },
        ControlCommand::Stop => next.recording = Stopped,
        ControlCommand::Pan(d) => next.pan_deg = shift(state.pan_deg, d, PAN_RANGE),
        ControlCommand::Tilt(d) => next.tilt_deg = shift(state.tilt_deg, d, TILT_RANGE),
        ControlCommand::Zoom(d) => next.zoom = shift(state.zoom, d, ZOOM_RANGE),
    }
    next
}

fn shift(v: f64, delta: f64, (lo, hi): (f64, f64)) -> f64 {
    if !delta.is_finite() {
        warn!(delta, "ignoring non-finite orientation delta");
        return v;
    }
    (v + delta).clamp(lo, hi)
}
