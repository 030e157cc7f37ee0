use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::broker::Broker;

#[derive(Clone, Copy, Debug)]
pub struct OutgoingMessage<'a> {
    pub routing_key: &'a str,
    pub envelope: &'a [u8],
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChannelError {
    #[error("link is down")]
    Down,
    #[error("connection lost: {0}")]
    Disconnected(String),
    #[error("broker refused publish: {0}")]
    Refused(String),
}

/// Result of a batch publish: the first `confirmed` messages are durable at
/// the broker; anything after them may or may not have arrived.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchOutcome {
    pub confirmed: usize,
    pub error: Option<ChannelError>,
}

impl BatchOutcome {
    pub fn complete(n: usize) -> Self {
        Self {
            confirmed: n,
            error: None,
        }
    }
}

/// Publisher side of a broker connection with per-message confirms.
pub trait PublishChannel {
    fn publish_batch(&mut self, msgs: &[OutgoingMessage<'_>]) -> BatchOutcome;
}

/// Fault switches for an in-process link, shared with the test harness.
#[derive(Debug, Default)]
pub struct LinkFaults {
    down: AtomicBool,
    /// One-shot: the next batch confirms this many messages, then the link drops.
    drop_after: Mutex<Option<usize>>,
    /// One-shot: the next batch reaches the broker but its confirms are lost.
    lose_confirms: AtomicBool,
}

impl LinkFaults {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn set_down(&self, down: bool) {
        self.down.store(down, Ordering::SeqCst);
    }

    pub fn is_down(&self) -> bool {
        self.down.load(Ordering::SeqCst)
    }

    pub fn drop_next_batch_after(&self, n: usize) {
        *self.drop_after.lock() = Some(n);
    }

    pub fn lose_next_confirms(&self) {
        self.lose_confirms.store(true, Ordering::SeqCst);
    }
}

/// Publishes straight into an in-process broker through a faultable link.
pub struct InProcChannel {
    broker: Arc<Broker>,
    faults: Arc<LinkFaults>,
}

impl InProcChannel {
    pub fn new(broker: Arc<Broker>, faults: Arc<LinkFaults>) -> Self {
        Self { broker, faults }
    }
}

impl PublishChannel for InProcChannel {
    fn publish_batch(&mut self, msgs: &[OutgoingMessage<'_>]) -> BatchOutcome {
        if self.faults.is_down() {
            return BatchOutcome {
                confirmed: 0,
                error: Some(ChannelError::Down),
            };
        }
        let limit = self.faults.drop_after.lock().take();
        let n = limit.map_or(msgs.len(), |l| l.min(msgs.len()));
        let batch: Vec<(&str, &[u8])> = msgs[..n]
            .iter()
            .map(|m| (m.routing_key, m.envelope))
            .collect();
        if let Err(e) = self.broker.publish_batch(&batch) {
            return BatchOutcome {
                confirmed: 0,
                error: Some(ChannelError::Refused(e.to_string())),
            };
        }
        if self.faults.lose_confirms.swap(false, Ordering::SeqCst) {
            return BatchOutcome {
                confirmed: 0,
                error: Some(ChannelError::Disconnected("confirms lost".into())),
            };
        }
        match limit {
            Some(_) if n < msgs.len() => {
                self.faults.set_down(true);
                BatchOutcome {
                    confirmed: n,
                    error: Some(ChannelError::Disconnected("link dropped mid-batch".into())),
                }
            }
            _ => BatchOutcome::complete(n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::BrokerConfig;
    use icu_core::ManualClock;

    fn msgs(n: usize) -> Vec<Vec<u8>> {
        (0..n).map(|i| vec![i as u8]).collect()
    }

    #[test]
    fn mid_batch_drop_confirms_prefix_and_takes_link_down() {
        let b = Broker::in_memory(BrokerConfig::default(), Arc::new(ManualClock::new(0)));
        let faults = LinkFaults::new();
        let mut ch = InProcChannel::new(b.clone(), faults.clone());
        let bodies = msgs(10);
        let out: Vec<_> = bodies
            .iter()
            .map(|e| OutgoingMessage { routing_key: "q", envelope: e })
            .collect();
        faults.drop_next_batch_after(4);
        let r = ch.publish_batch(&out);
        assert_eq!(r.confirmed, 4);
        assert!(r.error.is_some());
        assert!(faults.is_down());
        assert_eq!(ch.publish_batch(&out).confirmed, 0);
        assert_eq!(b.stats("q").ready, 4);
    }
}
