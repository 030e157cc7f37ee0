//! Time-based frame selection.

use icu_core::TimestampMs;

/// Frames within this distance of a pain report, either side, are kept.
pub const PAIN_WINDOW_MS: i64 = 3_600_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectError {
    #[error("frame rate must be positive and finite, got {0}")]
    Fps(f64),
}

/// Keeps the timestamps within `window_ms` (inclusive) of any pain report,
/// in input order.
pub fn filter_by_pain_window(frames: &[TimestampMs], pain: &[TimestampMs], window_ms: i64) -> Vec<TimestampMs> {
    let mut pain = pain.to_vec();
    pain.sort_unstable();
    frames
        .iter()
        .copied()
        .filter(|&t| {
            // the nearest report on either side decides
            let i = pain.partition_point(|&p| p < t);
            let after = pain.get(i).is_some_and(|&p| p - t <= window_ms);
            let before = i > 0 && t - pain[i - 1] <= window_ms;
            after || before
        })
        .collect()
}

/// Resamples a time-ordered sequence to `fps`: time is cut into buckets of
/// `1000 / fps` ms starting at the first frame, and the first frame of each
/// bucket is kept. Returns indices into `ts`.
pub fn extract_frames(ts: &[TimestampMs], fps: f64) -> Result<Vec<usize>, SelectError> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(SelectError::Fps(fps));
    }
    let period = 1000.0 / fps;
    let Some(&t0) = ts.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    let mut last_bucket = None;
    for (i, &t) in ts.iter().enumerate() {
        let b = ((t - t0) as f64 / period).floor() as i64;
        if last_bucket.is_none_or(|l| b > l) {
            out.push(i);
            last_bucket = Some(b);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_edges() {
        let p = 10_000_000;
        let f = [p, p + PAIN_WINDOW_MS, p + PAIN_WINDOW_MS + 1, p - PAIN_WINDOW_MS, p - PAIN_WINDOW_MS - 1];
        assert_eq!(filter_by_pain_window(&f, &[p], PAIN_WINDOW_MS), vec![f[0], f[1], f[3]]);
        assert!(filter_by_pain_window(&f, &[], PAIN_WINDOW_MS).is_empty());
    }

    #[test]
    fn resampling() {
        let ts: Vec<i64> = (0..60).map(|i| 5_000 + i * 1_000).collect();
        assert_eq!(extract_frames(&ts, 1.0).unwrap(), (0..60).collect::<Vec<_>>());
        assert_eq!(extract_frames(&ts, 0.5).unwrap(), (0..60).step_by(2).collect::<Vec<_>>());
        assert!(extract_frames(&ts, 0.0).is_err());
        assert!(extract_frames(&ts, f64::NAN).is_err());
        assert!(extract_frames(&[], 1.0).unwrap().is_empty());
    }
}
