//! Edge → broker delivery under random outage and crash schedules.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use icu_core::{CartKey, Clock, ManualClock, Modality, RecordEnvelope, RecordKey};
use icu_edge::{Backoff, CartAgent, CartIdentity, OutboxConfig, Produced, SensorSimConfig};
use icu_transport::{Broker, BrokerConfig, InProcChannel, LinkFaults};
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum Event {
    Down(u32),
    Up,
    DropAfter(usize),
    LoseConfirms,
    Crash,
    Nothing,
}

fn event() -> impl Strategy<Value = Event> {
    prop_oneof![
        3 => Just(Event::Nothing),
        1 => (5u32..40).prop_map(Event::Down),
        1 => Just(Event::Up),
        1 => (0usize..6).prop_map(Event::DropAfter),
        1 => Just(Event::LoseConfirms),
        1 => Just(Event::Crash),
    ]
}

fn open(dir: &std::path::Path) -> CartAgent {
    let id = CartIdentity {
        cart_id: "c7".into(),
        room_id: "r7".into(),
        codec_id: "deflate".into(),
        key: CartKey::new("k7", [9; 32]),
    };
    let sensors = vec![
        SensorSimConfig::new(Modality::Light, "light0", 1),
        SensorSimConfig::new(Modality::Noise, "noise0", 2),
        SensorSimConfig::new(Modality::Accel, "accel0", 3),
    ];
    let ob = OutboxConfig { compact_after: 16, sync: false };
    CartAgent::open(id, sensors, dir, ob, Backoff::new(5), true).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stored_keys_equal_enqueued_keys(events in prop::collection::vec(event(), 20..60)) {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(1_000_000);
        let broker = Broker::in_memory(BrokerConfig::default(), Arc::new(clock.clone()));
        let faults = LinkFaults::new();
        let mut ch = InProcChannel::new(broker.clone(), faults.clone());
        let mut agent = open(dir.path());
        let mut enqueued = BTreeSet::new();
        let mut down_for = 0u32;

        let mut step = |agent: &mut CartAgent, enqueued: &mut BTreeSet<RecordKey>| {
            for (i, r) in agent.capture(&clock).unwrap().into_iter().enumerate() {
                if let Produced::Enqueued { seq, .. } = r {
                    let sensor = agent.producers()[i].sensor_id().to_owned();
                    enqueued.insert(RecordKey::new("c7", sensor, seq));
                }
            }
            agent.publish(&mut ch, clock.now_ms()).unwrap();
            clock.advance(250);
        };

        for ev in events {
            match ev {
                Event::Down(n) => { faults.set_down(true); down_for = n; }
                Event::Up => faults.set_down(false),
                Event::DropAfter(n) => faults.drop_next_batch_after(n),
                Event::LoseConfirms => faults.lose_next_confirms(),
                Event::Crash => { drop(std::mem::replace(&mut agent, open(dir.path()))); }
                Event::Nothing => {}
            }
            for _ in 0..4 {
                step(&mut agent, &mut enqueued);
                if down_for > 0 {
                    down_for -= 1;
                    if down_for == 0 { faults.set_down(false); }
                }
            }
        }
        // eventual connectivity; an armed one-shot drop may still fire once
        for _ in 0..400 {
            faults.set_down(false);
            step(&mut agent, &mut enqueued);
            if agent.backlog(clock.now_ms()).iter().all(|b| b.pending == 0) { break; }
        }
        prop_assert!(agent.backlog(clock.now_ms()).iter().all(|b| b.pending == 0), "outbox never drained");

        let mut stored = BTreeSet::new();
        let mut per_sensor: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for q in broker.queue_names() {
            let mut c = broker.consume(&q, 10_000).unwrap();
            while let Some(d) = c.try_next() {
                let env = RecordEnvelope::decode(&d.envelope).unwrap();
                per_sensor.entry(env.key.sensor_id.clone()).or_default().push(env.key.seq);
                stored.insert(env.key);
                c.ack(d.tag).unwrap();
            }
        }
        prop_assert_eq!(&stored, &enqueued);
        // first arrivals per sensor are in seq order
        for seqs in per_sensor.values() {
            let mut seen = BTreeSet::new();
            let firsts: Vec<u64> = seqs.iter().copied().filter(|s| seen.insert(*s)).collect();
            prop_assert!(firsts.windows(2).all(|w| w[0] < w[1]), "{:?}", firsts);
        }
        // seq is gap-free per sensor across crashes
        for (sensor, seqs) in &per_sensor {
            let max = *seqs.iter().max().unwrap();
            let distinct: BTreeSet<_> = seqs.iter().collect();
            prop_assert_eq!(distinct.len() as u64, max, "gap in {}", sensor);
        }
    }
}
