//! Turning sampled on/off conditions into time intervals.
//!
//! Each sample at `t` speaks for `[t, t + step)`. Consecutive active samples
//! whose spans touch form one run; a missing sample or an inactive one ends it.

use icu_core::TimestampMs;
use serde::{Deserialize, Serialize};

/// Half-open `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub start: TimestampMs,
    pub end: TimestampMs,
}

impl Interval {
    pub fn duration(&self) -> i64 {
        self.end - self.start
    }
}

/// Streaming run detector. Feed samples in time order, in any batching.
#[derive(Clone, Debug)]
pub struct RunBuilder {
    step: i64,
    open: Option<Interval>,
    done: Vec<Interval>,
}

impl RunBuilder {
    pub fn new(step_ms: i64) -> Self {
        assert!(step_ms > 0, "sample step must be positive");
        Self { step: step_ms, open: None, done: Vec::new() }
    }

    pub fn push(&mut self, ts: TimestampMs, active: bool) {
        if let Some(cur) = self.open.as_mut() {
            if active && ts <= cur.end {
                cur.end = cur.end.max(ts + self.step);
                return;
            }
            // an inactive sample inside the last span cuts it short
            if !active && ts < cur.end {
                cur.end = ts.max(cur.start);
            }
            let closed = self.open.take().expect("checked");
            if closed.end > closed.start {
                self.done.push(closed);
            }
        }
        if active {
            self.open = Some(Interval { start: ts, end: ts + self.step });
        }
    }

    pub fn extend(&mut self, samples: impl IntoIterator<Item = (TimestampMs, bool)>) {
        for (t, a) in samples {
            self.push(t, a);
        }
    }

    pub fn finish(mut self) -> Vec<Interval> {
        if let Some(cur) = self.open.take() {
            self.done.push(cur);
        }
        self.done
    }
}

/// Sorts, then merges intervals that overlap or are separated by less than
/// `gap_ms`.
pub fn merge_close(mut v: Vec<Interval>, gap_ms: i64) -> Vec<Interval> {
    v.sort();
    let mut out: Vec<Interval> = Vec::with_capacity(v.len());
    for iv in v {
        match out.last_mut() {
            Some(last) if iv.start - last.end < gap_ms => last.end = last.end.max(iv.end),
            _ => out.push(iv),
        }
    }
    out
}
