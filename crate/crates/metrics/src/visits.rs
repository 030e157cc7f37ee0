//! Person counts, visitation and nightly disruptions.

use std::collections::BTreeMap;

use icu_core::{DepthFrame, TimestampMs};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::intervals::{merge_close, Interval, RunBuilder};
use crate::plugin::{require_kind, InferencePlugin, PluginError, PluginInput, PluginKind};
use crate::time::DayClock;

/// Persons in one frame; `None` where the plugin failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountPoint {
    pub ts: TimestampMs,
    pub count: Option<u32>,
}

pub fn person_count_series(frames: &[(TimestampMs, DepthFrame)], plugin: &dyn InferencePlugin) -> Result<Vec<CountPoint>, PluginError> {
    require_kind(plugin, PluginKind::PostureDetect)?;
    Ok(frames
        .iter()
        .map(|(ts, f)| {
            let count = match plugin.infer(&PluginInput::Depth(f)) {
                Ok(out) => Some(out.detections.len() as u32),
                Err(e) => {
                    warn!(ts, error = %e, "posture inference failed; leaving a gap");
                    None
                }
            };
            CountPoint { ts: *ts, count }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Day,
    Night,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub interval: Interval,
    pub period: Period,
    /// Local date of the visit's start.
    pub date: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitCounts {
    pub day_visits: u32,
    pub night_visits: u32,
    pub visits: Vec<Visit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitRule {
    pub min_persons: u32,
    pub min_duration_ms: i64,
    pub merge_gap_ms: i64,
    /// Span each sample covers.
    pub sample_step_ms: i64,
}

impl Default for VisitRule {
    fn default() -> Self {
        Self { min_persons: 2, min_duration_ms: 60_000, merge_gap_ms: 60_000, sample_step_ms: 1_000 }
    }
}

/// A visit is a stretch with at least `min_persons` in view. Stretches less
/// than `merge_gap_ms` apart are joined first; the joined stretch must then
/// last `min_duration_ms`. Each visit counts toward the period it starts in.
/// Gaps in the series count as no visit.
pub fn visitation(counts: &[CountPoint], rule: &VisitRule, clock: &DayClock) -> VisitCounts {
    let mut runs = RunBuilder::new(rule.sample_step_ms);
    runs.extend(counts.iter().map(|c| (c.ts, c.count.is_some_and(|n| n >= rule.min_persons))));
    let mut out = VisitCounts::default();
    for iv in merge_close(runs.finish(), rule.merge_gap_ms) {
        if iv.duration() < rule.min_duration_ms {
            continue;
        }
        let period = if clock.is_day(iv.start) { Period::Day } else { Period::Night };
        match period {
            Period::Day => out.day_visits += 1,
            Period::Night => out.night_visits += 1,
        }
        out.visits.push(Visit { interval: iv, period, date: clock.local_date(iv.start) });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisruptionRule {
    pub light_threshold: f64,
    pub noise_threshold: f64,
    pub min_duration_ms: i64,
    pub merge_gap_ms: i64,
    pub sample_step_ms: i64,
}

impl Default for DisruptionRule {
    fn default() -> Self {
        Self { light_threshold: 100.0, noise_threshold: 60.0, min_duration_ms: 30_000, merge_gap_ms: 60_000, sample_step_ms: 1_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NightCount {
    /// Date the night began on.
    pub night: String,
    pub disruptions: u32,
    /// Earliest night-time sample of this night.
    pub first_ts: TimestampMs,
    pub intervals: Vec<Interval>,
}

/// Disruptions per night: night-time stretches with light or noise above
/// threshold, joined across gaps shorter than `merge_gap_ms`, lasting at
/// least `min_duration_ms`. Every night with samples is listed, quiet ones
/// with zero. Inputs must be time ordered.
pub fn nightly_disruptions(
    light: &[(TimestampMs, f64)],
    noise: &[(TimestampMs, f64)],
    rule: &DisruptionRule,
    clock: &DayClock,
) -> Vec<NightCount> {
    let mut nights: BTreeMap<String, NightCount> = BTreeMap::new();
    let mut raw = Vec::new();
    for (series, thr) in [(light, rule.light_threshold), (noise, rule.noise_threshold)] {
        let mut runs = RunBuilder::new(rule.sample_step_ms);
        for &(ts, v) in series {
            let night = clock.is_night(ts);
            if night {
                let n = nights.entry(clock.night_of(ts)).or_insert_with(|| NightCount {
                    night: clock.night_of(ts),
                    disruptions: 0,
                    first_ts: ts,
                    intervals: Vec::new(),
                });
                n.first_ts = n.first_ts.min(ts);
            }
            runs.push(ts, night && v > thr);
        }
        raw.extend(runs.finish());
    }
    for iv in merge_close(raw, rule.merge_gap_ms) {
        if iv.duration() < rule.min_duration_ms {
            continue;
        }
        let n = nights.get_mut(&clock.night_of(iv.start)).expect("interval starts on a night-time sample");
        n.disruptions += 1;
        n.intervals.push(iv);
    }
    nights.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::{MS_PER_DAY, MS_PER_HOUR};

    const D: i64 = 19_000 * MS_PER_DAY;

    fn counts(from: i64, secs: i64, n: u32) -> Vec<CountPoint> {
        (0..secs).map(|i| CountPoint { ts: from + i * 1000, count: Some(n) }).collect()
    }

    #[test]
    fn five_minute_morning_visit() {
        let mut series = counts(D + 9 * MS_PER_HOUR, 3600, 1);
        series.extend(counts(D + 10 * MS_PER_HOUR, 300, 2));
        series.extend(counts(D + 10 * MS_PER_HOUR + 300_000, 600, 1));
        let v = visitation(&series, &VisitRule::default(), &DayClock::default());
        assert_eq!((v.day_visits, v.night_visits), (1, 0));
        assert_eq!(v.visits[0].interval, Interval { start: D + 10 * MS_PER_HOUR, end: D + 10 * MS_PER_HOUR + 300_000 });
        let ones = visitation(&counts(D, 7200, 1), &VisitRule::default(), &DayClock::default());
        assert_eq!((ones.day_visits, ones.night_visits), (0, 0));
    }
}
