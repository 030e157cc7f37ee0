//! Visitation, disruption, environment and score rules against hand counts
//! and brute-force oracles.

use icu_core::{ClinicalFeed, PseudonymKey, TimestampMs};
use icu_metrics::{
    env_stats, nightly_disruptions, score_series, visitation, CountPoint, DayClock, DisruptionRule, InferencePlugin, Metric,
    PluginInput, RunBuilder, StubScorePlugin, VisitRule,
};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

const S: i64 = 1_000;
const H: i64 = 3_600_000;
const DAY: i64 = 24 * H;

/// One count per second from `from` to `to`, `n` persons inside the bursts
/// and 1 elsewhere.
fn counts(from: i64, to: i64, bursts: &[(i64, i64)], n: u32) -> Vec<CountPoint> {
    (from / S..to / S)
        .map(|s| {
            let ts = s * S;
            let inside = bursts.iter().any(|&(a, b)| a <= ts && ts < b);
            CountPoint { ts, count: Some(if inside { n } else { 1 }) }
        })
        .collect()
}

fn visits(c: &[CountPoint]) -> (u32, u32) {
    let v = visitation(c, &VisitRule::default(), &DayClock::default());
    (v.day_visits, v.night_visits)
}

#[test]
fn visitation_hand_counts() {
    // a full day of background at 1 Hz
    assert_eq!(visits(&counts(0, DAY, &[], 2)), (0, 0));
    let ten = 10 * H;
    assert_eq!(visits(&counts(0, DAY, &[(ten, ten + 5 * 60 * S)], 2)), (1, 0));
    // three persons count as a visit too
    assert_eq!(visits(&counts(0, DAY, &[(ten, ten + 5 * 60 * S)], 3)), (1, 0));
    // 40 s bursts 30 s apart merge into one 110 s visit
    assert_eq!(visits(&counts(0, DAY, &[(ten, ten + 40 * S), (ten + 70 * S, ten + 110 * S)], 2)), (1, 0));
    // 60 s apart they stay separate and each is too short
    assert_eq!(visits(&counts(0, DAY, &[(ten, ten + 40 * S), (ten + 100 * S, ten + 140 * S)], 2)), (0, 0));
    // exactly 60 s long qualifies, 59 s does not
    assert_eq!(visits(&counts(0, DAY, &[(ten, ten + 60 * S)], 2)), (1, 0));
    assert_eq!(visits(&counts(0, DAY, &[(ten, ten + 59 * S)], 2)), (0, 0));
    // night visit, and a visit straddling 19:00 counts where it starts
    let late = 22 * H;
    assert_eq!(visits(&counts(0, DAY, &[(late, late + 120 * S)], 2)), (0, 1));
    let dusk = 19 * H - 30 * S;
    assert_eq!(visits(&counts(0, DAY, &[(dusk, dusk + 300 * S)], 2)), (1, 0));
    let dawn = 7 * H - 30 * S;
    assert_eq!(visits(&counts(0, DAY, &[(dawn, dawn + 300 * S)], 2)), (0, 1));
}

#[test]
fn visitation_gaps_are_not_visits() {
    let ten = 10 * H;
    let mut c = counts(0, DAY, &[(ten, ten + 5 * 60 * S)], 2);
    // a 70 s run of plugin failures splits the visit into 150 s and 80 s
    for p in c.iter_mut().filter(|p| p.ts >= ten + 150 * S && p.ts < ten + 220 * S) {
        p.count = None;
    }
    assert_eq!(visits(&c), (2, 0));
    // a 30 s failure run is bridged
    let mut c = counts(0, DAY, &[(ten, ten + 5 * 60 * S)], 2);
    for p in c.iter_mut().filter(|p| p.ts >= ten + 150 * S && p.ts < ten + 180 * S) {
        p.count = None;
    }
    assert_eq!(visits(&c), (1, 0));
}

fn env(from: i64, to: i64, spikes: &[(i64, i64)], base: f64, loud: f64) -> Vec<(TimestampMs, f64)> {
    (from / S..to / S)
        .map(|s| {
            let ts = s * S;
            (ts, if spikes.iter().any(|&(a, b)| a <= ts && ts < b) { loud } else { base })
        })
        .collect()
}

fn disruptions(light: &[(TimestampMs, f64)], noise: &[(TimestampMs, f64)]) -> Vec<(String, u32)> {
    nightly_disruptions(light, noise, &DisruptionRule::default(), &DayClock::default())
        .into_iter()
        .map(|n| (n.night, n.disruptions))
        .collect()
}

#[test]
fn disruption_hand_counts() {
    // 12:00 on day 1 to 12:00 on day 2 covers the night that begins on day 1
    let (from, to) = (DAY + 12 * H, 2 * DAY + 12 * H);
    let quiet = env(from, to, &[], 5.0, 5.0);
    let night = "1970-01-02".to_string();
    assert_eq!(disruptions(&quiet, &quiet), vec![(night.clone(), 0)]);
    let two_am = 2 * DAY + 2 * H;
    let spike = env(from, to, &[(two_am, two_am + 120 * S)], 5.0, 300.0);
    assert_eq!(disruptions(&spike, &quiet), vec![(night.clone(), 1)]);
    // daytime spike does not count
    let noon = env(from, to, &[(DAY + 12 * H + 60 * S, DAY + 12 * H + 300 * S)], 5.0, 300.0);
    assert_eq!(disruptions(&noon, &quiet), vec![(night.clone(), 0)]);
    // noise alone counts; threshold is strict
    let loud = env(from, to, &[(two_am, two_am + 120 * S)], 40.0, 75.0);
    assert_eq!(disruptions(&quiet, &loud), vec![(night.clone(), 1)]);
    let at_thr = env(from, to, &[(two_am, two_am + 120 * S)], 40.0, 60.0);
    assert_eq!(disruptions(&quiet, &at_thr), vec![(night.clone(), 0)]);
    // 20 s of light then 20 s of noise 40 s later: merged across channels, 80 s
    let l = env(from, to, &[(two_am, two_am + 20 * S)], 5.0, 300.0);
    let n = env(from, to, &[(two_am + 60 * S, two_am + 80 * S)], 5.0, 90.0);
    assert_eq!(disruptions(&l, &n), vec![(night.clone(), 1)]);
    // 20 s alone is too short
    assert_eq!(disruptions(&l, &quiet), vec![(night.clone(), 0)]);
    // two 40 s spikes 2 min apart are two disruptions
    let two = env(from, to, &[(two_am, two_am + 40 * S), (two_am + 160 * S, two_am + 200 * S)], 5.0, 300.0);
    assert_eq!(disruptions(&two, &quiet), vec![(night, 2)]);
}

#[test]
fn disruptions_listed_per_night() {
    let (from, to) = (0, 3 * DAY);
    let spikes = [(2 * H, 2 * H + 60 * S), (DAY + 23 * H, DAY + 23 * H + 60 * S), (DAY + 23 * H + 10 * 60 * S, DAY + 23 * H + 11 * 60 * S)];
    let light = env(from, to, &spikes, 0.0, 500.0);
    let got = disruptions(&light, &[]);
    // the night before day 0 started at 19:00 on 1969-12-31
    assert_eq!(
        got,
        vec![("1969-12-31".into(), 1), ("1970-01-01".into(), 0), ("1970-01-02".into(), 2), ("1970-01-03".into(), 0)]
    );
}

fn random_series(rng: &mut ChaCha8Rng, n: usize, span: i64) -> Vec<(TimestampMs, f64)> {
    let mut v: Vec<_> = (0..n).map(|_| (rng.gen_range(-span..span), rng.gen_range(0.0..120.0))).collect();
    v.sort_by_key(|s| s.0);
    v
}

#[test]
fn env_stats_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for round in 0..200 {
        let window = [1_000, 60_000, H, 7_777][round % 4];
        let (nn, nl) = (rng.gen_range(0..300), rng.gen_range(0..300));
        let noise = random_series(&mut rng, nn, 20 * window);
        let light = random_series(&mut rng, nl, 20 * window);
        let got = env_stats(&noise, &light, window);
        let all: Vec<i64> = noise.iter().chain(&light).map(|s| s.0).collect();
        if all.is_empty() {
            assert!(got.is_empty());
            continue;
        }
        let lo = all.iter().min().unwrap().div_euclid(window);
        let hi = all.iter().max().unwrap().div_euclid(window);
        assert_eq!(got.len() as i64, hi - lo + 1);
        let mut seen = 0;
        for (w, k) in got.iter().zip(lo..=hi) {
            assert_eq!((w.start, w.end), (k * window, (k + 1) * window));
            for (series, stats) in [(&noise, w.noise), (&light, w.light)] {
                let inside: Vec<f64> = series.iter().filter(|s| w.start <= s.0 && s.0 < w.end).map(|s| s.1).collect();
                match stats {
                    None => assert!(inside.is_empty()),
                    Some(st) => {
                        assert_eq!(st.count, inside.len());
                        let mean = inside.iter().sum::<f64>() / inside.len() as f64;
                        assert!((st.mean - mean).abs() < 1e-9);
                        assert_eq!(st.max, inside.iter().cloned().fold(f64::MIN, f64::max));
                    }
                }
                seen += inside.len();
            }
            assert_eq!(w.sample_count, w.noise.map_or(0, |c| c.count) + w.light.map_or(0, |c| c.count));
        }
        // windows partition the samples
        assert_eq!(seen, noise.len() + light.len());
    }
    assert!(env_stats(&[], &[], H).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rechunking_does_not_change_results(
        pattern in proptest::collection::vec(0u8..4, 1..600),
        cuts in proptest::collection::vec(0usize..600, 0..8),
        start_hour in 0i64..24,
    ) {
        let t0 = start_hour * H;
        let c: Vec<CountPoint> = pattern.iter().enumerate().map(|(i, &n)| CountPoint {
            ts: t0 + i as i64 * S,
            count: if n == 3 { None } else { Some(n as u32) },
        }).collect();
        let mut cuts: Vec<usize> = cuts.into_iter().filter(|&k| k < c.len()).collect();
        cuts.push(c.len());
        cuts.sort();
        let rule = VisitRule { min_duration_ms: 20 * S, merge_gap_ms: 10 * S, ..Default::default() };
        let clock = DayClock::default();

        // incremental run building over the chunks
        let active = |p: &CountPoint| (p.ts, p.count.is_some_and(|n| n >= 2));
        let mut whole = RunBuilder::new(S);
        whole.extend(c.iter().map(active));
        let mut chunked = RunBuilder::new(S);
        let mut from = 0;
        for &k in &cuts {
            chunked.extend(c[from..k].iter().map(active));
            from = k;
        }
        prop_assert_eq!(whole.finish(), chunked.finish());

        // batches concatenated in arrival order
        let mut batches: Vec<Vec<CountPoint>> = Vec::new();
        let mut from = 0;
        for &k in &cuts {
            batches.push(c[from..k].to_vec());
            from = k;
        }
        let joined: Vec<CountPoint> = batches.concat();
        prop_assert_eq!(visitation(&joined, &rule, &clock), visitation(&c, &rule, &clock));

        let light: Vec<(i64, f64)> = c.iter().map(|p| (p.ts, p.count.unwrap_or(0) as f64 * 60.0)).collect();
        let drule = DisruptionRule { min_duration_ms: 15 * S, merge_gap_ms: 10 * S, ..Default::default() };
        let mut rebuilt = Vec::new();
        for b in &batches {
            rebuilt.extend(b.iter().map(|p| (p.ts, p.count.unwrap_or(0) as f64 * 60.0)));
        }
        prop_assert_eq!(
            nightly_disruptions(&rebuilt, &[], &drule, &clock),
            nightly_disruptions(&light, &[], &drule, &clock)
        );
    }
}

const FEED: &str = r#"
{"type":"session","patient_id":"MRN-7","room_id":"r1","cart_id":"c1","admission_ts":1800000,"discharge_ts":18000000}
{"type":"vital","patient_id":"MRN-7","ts":0,"name":"heart_rate","value":110.0}
{"type":"vital","patient_id":"MRN-7","ts":3000000,"name":"spo2","value":91.0}
{"type":"vital","patient_id":"MRN-7","ts":3000000,"name":"gcs","value":13.0}
{"type":"vital","patient_id":"MRN-7","ts":7200000,"name":"heart_rate","value":70.0}
{"type":"vital","patient_id":"MRN-7","ts":7300000,"name":"temp_c","value":39.0}
{"type":"vital","patient_id":"MRN-7","ts":7300000,"name":"pressure_unknown","value":1.0}
"#;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn stub_score_matches_hand_formula() {
    let key = PseudonymKey::new([5u8; 16]).unwrap();
    let feed = ClinicalFeed::parse(FEED, &key).unwrap();
    let study = key.study_id("MRN-7");
    let points = score_series(&study, Metric::Acuity, &StubScorePlugin::acuity(), Some(&feed), H).unwrap();
    // hourly on the hour inside [0.5 h, 5 h)
    assert_eq!(points.iter().map(|p| p.ts).collect::<Vec<_>>(), vec![H, 2 * H, 3 * H, 4 * H]);
    // 1 h: hr 110, spo2 91, gcs 13
    let z1 = -1.5 + 0.03 * (110.0 - 80.0) - 0.12 * (91.0 - 97.0) - 0.35 * (13.0 - 15.0);
    // 2 h: hr 70 replaces 110
    let z2 = -1.5 + 0.03 * (70.0 - 80.0) - 0.12 * (91.0 - 97.0) - 0.35 * (13.0 - 15.0);
    // 3 h and 4 h: temperature 39 joins
    let z3 = z2 + 0.4 * (39.0 - 37.0);
    let want = [logistic(z1), logistic(z2), logistic(z3), logistic(z3)];
    for (p, w) in points.iter().zip(want) {
        assert!((p.value - w).abs() < 1e-12, "{} vs {w}", p.value);
        assert_eq!(p.metric, Metric::Acuity);
        assert_eq!(p.study_id, study);
    }
    // lookback: heart rate from t=0 is stale seven hours later
    let p = StubScorePlugin::acuity();
    let vitals = feed.vitals_of(&study);
    let z = p.linear_term(&vitals, 6 * H + 1);
    assert!((z - (-1.5 + 0.03 * (70.0 - 80.0) - 0.12 * (91.0 - 97.0) - 0.35 * (13.0 - 15.0) + 0.4 * 2.0)).abs() < 1e-12);
    let z = p.linear_term(&vitals, 2 * H + 6 * H - 100 * S);
    // spo2 and gcs from 3 000 000 ms have aged out, the later readings have not
    assert!((z - (-1.5 + 0.03 * (70.0 - 80.0) + 0.4 * 2.0)).abs() < 1e-12);
    assert_eq!(p.linear_term(&vitals, 20 * H), -1.5);
}

#[test]
fn score_edges() {
    let key = PseudonymKey::new([5u8; 16]).unwrap();
    let study = key.study_id("MRN-7");
    assert!(score_series(&study, Metric::Acuity, &StubScorePlugin::acuity(), None, H).unwrap().is_empty());
    let empty = ClinicalFeed::default();
    assert!(score_series(&study, Metric::Acuity, &StubScorePlugin::acuity(), Some(&empty), H).unwrap().is_empty());
    // wrong plugin kind is rejected
    assert!(score_series(&study, Metric::Acuity, &icu_metrics::MockAuPlugin, Some(&empty), H).is_err());
    // extreme inputs stay in [0, 1]
    let wild = StubScorePlugin {
        name: "wild".into(),
        bias: 0.0,
        lookback_ms: i64::MAX / 4,
        variables: vec![icu_metrics::ScoreVariable { name: "x".into(), weight: 1e6, reference: 0.0 }],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let x: f64 = rng.gen_range(-1e6..1e6);
        let vitals = [("x", vec![(0, x)])].into_iter().collect();
        let out = wild.infer(&PluginInput::Vitals { vitals: &vitals, at: 1 }).unwrap();
        let v = out.scores["score"];
        assert!((0.0..=1.0).contains(&v));
    }
}
