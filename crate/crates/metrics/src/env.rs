//! Noise and light statistics over tumbling windows.

use icu_core::TimestampMs;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub max: f64,
    pub count: usize,
    /// Earliest sample in the window.
    pub first_ts: TimestampMs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvWindowStats {
    pub start: TimestampMs,
    pub end: TimestampMs,
    pub noise: Option<ChannelStats>,
    pub light: Option<ChannelStats>,
    pub sample_count: usize,
}

fn channel(samples: &[(TimestampMs, f64)]) -> Option<ChannelStats> {
    let (&(first_ts, _), _) = samples.split_first()?;
    let sum: f64 = samples.iter().map(|s| s.1).sum();
    let max = samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    Some(ChannelStats { mean: sum / samples.len() as f64, max, count: samples.len(), first_ts })
}

/// Windows `[k·w, (k+1)·w)` from the one holding the earliest sample to the
/// one holding the latest, empty ones included. Inputs must be time ordered.
pub fn env_stats(noise: &[(TimestampMs, f64)], light: &[(TimestampMs, f64)], window_ms: i64) -> Vec<EnvWindowStats> {
    assert!(window_ms > 0, "window must be positive");
    let ends = noise.iter().chain(light).map(|s| s.0);
    let (Some(lo), Some(hi)) = (ends.clone().min(), ends.max()) else {
        return Vec::new();
    };
    let first = lo.div_euclid(window_ms);
    let last = hi.div_euclid(window_ms);
    let (mut ni, mut li) = (0, 0);
    let mut out = Vec::with_capacity((last - first + 1) as usize);
    for k in first..=last {
        let (start, end) = (k * window_ms, (k + 1) * window_ms);
        let take = |v: &[(TimestampMs, f64)], i: &mut usize| {
            let from = *i;
            while *i < v.len() && v[*i].0 < end {
                *i += 1;
            }
            from..*i
        };
        let nr = take(noise, &mut ni);
        let lr = take(light, &mut li);
        let (n, l) = (channel(&noise[nr]), channel(&light[lr]));
        out.push(EnvWindowStats {
            start,
            end,
            sample_count: n.map_or(0, |c| c.count) + l.map_or(0, |c| c.count),
            noise: n,
            light: l,
        });
    }
    out
}
