//! Drains outbox partitions into a publish channel.

use std::sync::Arc;

use icu_core::TimestampMs;
use icu_transport::{ChannelError, OutgoingMessage, PublishChannel};
use parking_lot::Mutex;
use tracing::{debug, warn};

use crate::backoff::Backoff;
use crate::outbox::{Outbox, OutboxError};

/// One sensor's outbox and the queue its entries are routed to.
#[derive(Clone, Debug)]
pub struct Partition {
    pub routing_key: String,
    pub outbox: Arc<Mutex<Outbox>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PublishReport {
    /// Entries handed to the channel.
    pub attempted: usize,
    /// Entries confirmed by the broker and marked acked.
    pub acked: usize,
    pub error: Option<ChannelError>,
    /// True when the call was skipped because a retry is not yet due.
    pub backing_off: bool,
}

#[derive(Debug)]
pub struct Publisher {
    backoff: Backoff,
    next_attempt_at: Option<TimestampMs>,
    /// Most entries taken from one partition per call.
    pub max_batch: usize,
}

impl Publisher {
    pub fn new(backoff: Backoff) -> Self {
        Self {
            backoff,
            next_attempt_at: None,
            max_batch: 256,
        }
    }

    pub fn next_attempt_at(&self) -> Option<TimestampMs> {
        self.next_attempt_at
    }

    pub fn consecutive_failures(&self) -> u32 {
        self.backoff.failures()
    }

    /// Sends pending entries of every partition, each in seq order, and acks
    /// the confirmed prefix. After a channel failure no further attempt is
    /// made until the backoff delay has passed.
    pub fn publish_pending(
        &mut self,
        partitions: &[Partition],
        channel: &mut dyn PublishChannel,
        now: TimestampMs,
    ) -> Result<PublishReport, OutboxError> {
        if self.next_attempt_at.is_some_and(|t| now < t) {
            return Ok(PublishReport { backing_off: true, ..Default::default() });
        }
        // snapshot: (partition index, seq, bytes)
        let mut batch: Vec<(usize, u64, Vec<u8>)> = Vec::new();
        for (i, p) in partitions.iter().enumerate() {
            let ob = p.outbox.lock();
            batch.extend(ob.pending().take(self.max_batch).map(|e| (i, e.seq, e.envelope.clone())));
        }
        if batch.is_empty() {
            return Ok(PublishReport::default());
        }
        let msgs: Vec<OutgoingMessage<'_>> = batch
            .iter()
            .map(|(i, _, bytes)| OutgoingMessage {
                routing_key: &partitions[*i].routing_key,
                envelope: bytes,
            })
            .collect();
        let outcome = channel.publish_batch(&msgs);
        let confirmed = outcome.confirmed.min(batch.len());

        // highest confirmed seq per partition
        let mut through: Vec<Option<u64>> = vec![None; partitions.len()];
        for (i, seq, _) in &batch[..confirmed] {
            through[*i] = Some(*seq);
        }
        let mut acked = 0;
        for (p, seq) in partitions.iter().zip(through) {
            if let Some(seq) = seq {
                acked += p.outbox.lock().ack_through(seq)?;
            }
        }

        match &outcome.error {
            None => {
                self.backoff.reset();
                self.next_attempt_at = None;
            }
            Some(err) => {
                let delay = self.backoff.next_delay_ms();
                self.next_attempt_at = Some(now + delay as i64);
                if self.backoff.failures() == 1 {
                    warn!(%err, acked, delay_ms = delay, "publish failed, backing off");
                } else {
                    debug!(%err, failures = self.backoff.failures(), delay_ms = delay, "publish retry failed");
                }
            }
        }
        Ok(PublishReport {
            attempted: batch.len(),
            acked,
            error: outcome.error,
            backing_off: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outbox::OutboxConfig;
    use icu_core::ManualClock;
    use icu_transport::{Broker, BrokerConfig, InProcChannel, LinkFaults};

    fn setup(n: u64) -> (tempfile::TempDir, Vec<Partition>, Arc<Broker>, Arc<LinkFaults>, InProcChannel) {
        let dir = tempfile::tempdir().unwrap();
        let mut ob = Outbox::open(dir.path(), "s1", OutboxConfig::default()).unwrap();
        for s in 1..=n {
            ob.enqueue(s, 0, s.to_be_bytes().to_vec()).unwrap();
        }
        let parts = vec![Partition { routing_key: "cart.c1.EMG".into(), outbox: Arc::new(Mutex::new(ob)) }];
        let broker = Broker::in_memory(BrokerConfig::default(), Arc::new(ManualClock::new(0)));
        let faults = LinkFaults::new();
        let ch = InProcChannel::new(broker.clone(), faults.clone());
        (dir, parts, broker, faults, ch)
    }

    fn drain(broker: &Arc<Broker>) -> Vec<u64> {
        let mut c = broker.consume("cart.c1.EMG", 1000).unwrap();
        let mut out = Vec::new();
        while let Some(d) = c.try_next() {
            out.push(u64::from_be_bytes(d.envelope[..8].try_into().unwrap()));
            c.ack(d.tag).unwrap();
        }
        out
    }

    #[test]
    fn channel_up_sends_and_acks_all() {
        let (_d, parts, broker, _f, mut ch) = setup(10);
        let mut p = Publisher::new(Backoff::new(1));
        let r = p.publish_pending(&parts, &mut ch, 0).unwrap();
        assert_eq!((r.attempted, r.acked), (10, 10));
        assert_eq!(parts[0].outbox.lock().pending_len(), 0);
        assert_eq!(drain(&broker), (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn channel_down_leaves_entries_pending() {
        let (_d, parts, _b, faults, mut ch) = setup(10);
        faults.set_down(true);
        let mut p = Publisher::new(Backoff::new(1));
        let r = p.publish_pending(&parts, &mut ch, 0).unwrap();
        assert_eq!(r.acked, 0);
        assert_eq!(parts[0].outbox.lock().pending_len(), 10);
        // retry is not attempted before the backoff delay (>= 400 ms)
        faults.set_down(false);
        assert!(p.publish_pending(&parts, &mut ch, 399).unwrap().backing_off);
        assert_eq!(p.publish_pending(&parts, &mut ch, 600).unwrap().acked, 10);
    }

    #[test]
    fn mid_batch_drop_then_reconnect_stores_each_once() {
        let (_d, parts, broker, faults, mut ch) = setup(10);
        let mut p = Publisher::new(Backoff::new(1));
        faults.drop_next_batch_after(4);
        let r = p.publish_pending(&parts, &mut ch, 0).unwrap();
        assert_eq!(r.acked, 4);
        assert_eq!(parts[0].outbox.lock().pending_len(), 6);
        faults.set_down(false);
        let r = p.publish_pending(&parts, &mut ch, 10_000).unwrap();
        assert_eq!(r.acked, 6);
        assert_eq!(drain(&broker), (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn lost_confirms_cause_in_order_duplicates_only() {
        let (_d, parts, broker, faults, mut ch) = setup(5);
        let mut p = Publisher::new(Backoff::new(1));
        faults.lose_next_confirms();
        assert_eq!(p.publish_pending(&parts, &mut ch, 0).unwrap().acked, 0);
        assert_eq!(p.publish_pending(&parts, &mut ch, 10_000).unwrap().acked, 5);
        let got = drain(&broker);
        assert_eq!(got, vec![1, 2, 3, 4, 5, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn backoff_grows_across_consecutive_failures() {
        let (_d, parts, _b, faults, mut ch) = setup(1);
        faults.set_down(true);
        let mut p = Publisher::new(Backoff::with_params(500, 30_000, 0.0, 1));
        let mut now = 0;
        let mut gaps = Vec::new();
        for _ in 0..8 {
            p.publish_pending(&parts, &mut ch, now).unwrap();
            let next = p.next_attempt_at().unwrap();
            gaps.push(next - now);
            now = next;
        }
        assert_eq!(gaps, [500, 1000, 2000, 4000, 8000, 16000, 30000, 30000]);
    }
}
