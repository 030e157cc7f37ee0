//! Live RGB preview fan-out: the latest frame per cart, at most one per
//! second of capture time. Frames live only in memory; a slow subscriber
//! simply misses intermediate frames.

use std::collections::HashMap;
use std::sync::Arc;

use base64::Engine as _;
use icu_core::{ColorImage, TimestampMs};
use parking_lot::Mutex;
use serde::Serialize;
use tokio::sync::watch;

pub const MIN_INTERVAL_MS: i64 = 1_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreviewFrame {
    pub cart_id: String,
    pub sensor_id: String,
    pub seq: u64,
    pub capture_ts: TimestampMs,
    pub width: usize,
    pub height: usize,
    /// Base64 of packed 8-bit RGB rows.
    pub rgb_base64: String,
}

impl PreviewFrame {
    pub fn new(cart_id: &str, sensor_id: &str, seq: u64, capture_ts: TimestampMs, img: &ColorImage) -> Self {
        Self {
            cart_id: cart_id.to_owned(),
            sensor_id: sensor_id.to_owned(),
            seq,
            capture_ts,
            width: img.width(),
            height: img.height(),
            rgb_base64: base64::engine::general_purpose::STANDARD.encode(img.pixels()),
        }
    }
}

pub type PreviewRx = watch::Receiver<Option<Arc<PreviewFrame>>>;

struct Channel {
    tx: watch::Sender<Option<Arc<PreviewFrame>>>,
    last_ts: Option<TimestampMs>,
}

#[derive(Default)]
pub struct PreviewHub {
    carts: Mutex<HashMap<String, Channel>>,
}

impl PreviewHub {
    pub fn new() -> Self {
        Self::default()
    }

    fn channel<'a>(map: &'a mut HashMap<String, Channel>, cart_id: &str) -> &'a mut Channel {
        map.entry(cart_id.to_owned()).or_insert_with(|| Channel {
            tx: watch::channel(None).0,
            last_ts: None,
        })
    }

    /// Offers a frame; returns whether it was published. Frames less than a
    /// second after the last published one, or older than it, are dropped.
    pub fn offer(&self, frame: PreviewFrame) -> bool {
        let mut map = self.carts.lock();
        let ch = Self::channel(&mut map, &frame.cart_id);
        if ch.last_ts.is_some_and(|t| frame.capture_ts < t + MIN_INTERVAL_MS) {
            return false;
        }
        ch.last_ts = Some(frame.capture_ts);
        ch.tx.send_replace(Some(Arc::new(frame)));
        true
    }

    pub fn subscribe(&self, cart_id: &str) -> PreviewRx {
        let mut map = self.carts.lock();
        Self::channel(&mut map, cart_id).tx.subscribe()
    }

    pub fn latest(&self, cart_id: &str) -> Option<Arc<PreviewFrame>> {
        self.carts.lock().get(cart_id).and_then(|c| c.tx.borrow().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(ts: i64) -> PreviewFrame {
        let img = ColorImage::new(1, 1, vec![1, 2, 3]).unwrap();
        PreviewFrame::new("c1", "rgb0", ts as u64, ts, &img)
    }

    #[test]
    fn rate_limited_to_one_per_second() {
        let hub = PreviewHub::new();
        let published: Vec<i64> = (0..30).map(|i| i * 100).filter(|&t| hub.offer(frame(t))).collect();
        assert_eq!(published, vec![0, 1000, 2000]);
        assert!(!hub.offer(frame(500)));
        assert_eq!(hub.latest("c1").unwrap().capture_ts, 2000);
    }

    #[test]
    fn slow_subscriber_sees_only_latest() {
        let hub = PreviewHub::new();
        let mut rx = hub.subscribe("c1");
        for t in 0..5 {
            hub.offer(frame(t * 1000));
        }
        assert!(rx.has_changed().unwrap());
        assert_eq!(rx.borrow_and_update().as_ref().unwrap().capture_ts, 4000);
        assert!(!rx.has_changed().unwrap());
    }
}
