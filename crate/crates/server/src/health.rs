//! Cart and sensor liveness.
//!
//! A sensor is stale once `now − last_seen` exceeds five nominal envelope
//! periods (at least 2 s). A cart is offline after 10 s without contact,
//! where contact is a control-link heartbeat or an ingested record.

use std::collections::BTreeMap;
use std::sync::Arc;

use icu_core::{CartState, CartStatus, Clock, Modality, TimestampMs};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub const OFFLINE_AFTER_MS: i64 = 10_000;
pub const STALE_PERIODS: i64 = 5;
pub const STALE_FLOOR_MS: i64 = 2_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthState {
    Live,
    Stale,
    Offline,
}

pub fn stale_threshold_ms(modality: Modality) -> i64 {
    (STALE_PERIODS * modality.envelope_period_ms()).max(STALE_FLOOR_MS)
}

/// Sensor state given its last sighting and whether the cart is reachable.
pub fn sensor_state(modality: Modality, last_seen: Option<TimestampMs>, cart_online: bool, now: TimestampMs) -> HealthState {
    if !cart_online {
        return HealthState::Offline;
    }
    match last_seen {
        Some(t) if now - t <= stale_threshold_ms(modality) => HealthState::Live,
        _ => HealthState::Stale,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorHealth {
    pub sensor_id: String,
    pub modality: Modality,
    pub last_seen_ts: Option<TimestampMs>,
    pub state: HealthState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartHealth {
    pub cart_id: String,
    pub room_id: Option<String>,
    /// Offline without contact; stale if any sensor is; live otherwise.
    pub state: HealthState,
    pub last_contact_ts: Option<TimestampMs>,
    /// Last state the cart reported.
    pub cart_state: Option<CartState>,
    pub sensors: Vec<SensorHealth>,
}

#[derive(Default)]
struct SensorEntry {
    modality: Option<Modality>,
    last_seen: Option<TimestampMs>,
}

#[derive(Default)]
struct CartEntry {
    room_id: Option<String>,
    last_contact: Option<TimestampMs>,
    state: Option<CartState>,
    sensors: BTreeMap<String, SensorEntry>,
}

pub struct HealthRegistry {
    clock: Arc<dyn Clock>,
    carts: Mutex<BTreeMap<String, CartEntry>>,
}

fn bump(slot: &mut Option<TimestampMs>, t: TimestampMs) {
    *slot = Some(slot.map_or(t, |s| s.max(t)));
}

impl HealthRegistry {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            carts: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn now(&self) -> TimestampMs {
        self.clock.now_ms()
    }

    /// Makes a cart known before it ever connects, so it reports offline.
    pub fn register_cart(&self, cart_id: &str) {
        self.carts.lock().entry(cart_id.to_owned()).or_default();
    }

    pub fn record_ingest(&self, cart_id: &str, sensor_id: &str, modality: Modality, room_id: &str) {
        let now = self.now();
        let mut carts = self.carts.lock();
        let cart = carts.entry(cart_id.to_owned()).or_default();
        cart.room_id.get_or_insert_with(|| room_id.to_owned());
        bump(&mut cart.last_contact, now);
        let s = cart.sensors.entry(sensor_id.to_owned()).or_default();
        s.modality = Some(modality);
        bump(&mut s.last_seen, now);
    }

    /// A STATUS heartbeat from the cart's control link.
    pub fn heartbeat(&self, status: &CartStatus) {
        let now = self.now();
        let mut carts = self.carts.lock();
        let cart = carts.entry(status.cart_id.clone()).or_default();
        cart.room_id = Some(status.room_id.clone());
        cart.state = Some(status.state);
        bump(&mut cart.last_contact, now);
        for s in &status.sensors {
            cart.sensors.entry(s.sensor_id.clone()).or_default().modality = Some(s.modality);
        }
    }

    pub fn set_cart_state(&self, cart_id: &str, state: CartState) {
        self.carts.lock().entry(cart_id.to_owned()).or_default().state = Some(state);
    }

    pub fn is_online(&self, cart_id: &str) -> bool {
        self.cart(cart_id).is_some_and(|c| c.state != HealthState::Offline)
    }

    pub fn cart(&self, cart_id: &str) -> Option<CartHealth> {
        let now = self.now();
        self.carts.lock().get(cart_id).map(|c| rollup(cart_id, c, now))
    }

    pub fn carts(&self) -> Vec<CartHealth> {
        let now = self.now();
        self.carts.lock().iter().map(|(id, c)| rollup(id, c, now)).collect()
    }
}

fn rollup(cart_id: &str, c: &CartEntry, now: TimestampMs) -> CartHealth {
    let online = c.last_contact.is_some_and(|t| now - t <= OFFLINE_AFTER_MS);
    let sensors: Vec<SensorHealth> = c
        .sensors
        .iter()
        .filter_map(|(id, s)| {
            let modality = s.modality?;
            Some(SensorHealth {
                sensor_id: id.clone(),
                modality,
                last_seen_ts: s.last_seen,
                state: sensor_state(modality, s.last_seen, online, now),
            })
        })
        .collect();
    let state = if !online {
        HealthState::Offline
    } else if sensors.iter().any(|s| s.state != HealthState::Live) {
        HealthState::Stale
    } else {
        HealthState::Live
    };
    CartHealth {
        cart_id: cart_id.to_owned(),
        room_id: c.room_id.clone(),
        state,
        last_contact_ts: c.last_contact,
        cart_state: c.state,
        sensors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use icu_core::ManualClock;

    #[test]
    fn depth_thresholds() {
        let d = Modality::DepthFrame;
        assert_eq!(sensor_state(d, Some(0), true, 3_000), HealthState::Live);
        assert_eq!(sensor_state(d, Some(0), true, 5_000), HealthState::Live);
        assert_eq!(sensor_state(d, Some(0), true, 5_001), HealthState::Stale);
        assert_eq!(sensor_state(d, Some(0), true, 7_000), HealthState::Stale);
        assert_eq!(sensor_state(d, None, true, 0), HealthState::Stale);
        assert_eq!(sensor_state(d, Some(0), false, 1), HealthState::Offline);
        assert_eq!(stale_threshold_ms(Modality::Emg), 5_000);
    }

    #[test]
    fn cart_goes_offline_when_silent() {
        let clock = ManualClock::new(0);
        let reg = HealthRegistry::new(Arc::new(clock.clone()));
        reg.register_cart("c9");
        assert_eq!(reg.cart("c9").unwrap().state, HealthState::Offline);
        reg.record_ingest("c1", "depth0", Modality::DepthFrame, "r1");
        assert_eq!(reg.cart("c1").unwrap().state, HealthState::Live);
        clock.set(7_000);
        assert_eq!(reg.cart("c1").unwrap().state, HealthState::Stale);
        clock.set(15_000);
        let h = reg.cart("c1").unwrap();
        assert_eq!(h.state, HealthState::Offline);
        assert_eq!(h.sensors[0].state, HealthState::Offline);
        assert!(!reg.is_online("c1"));
    }
}
