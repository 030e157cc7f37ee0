//! Depth frames rendered for annotators.
//!
//! Depths are clipped to the frame's 1st..99th percentile so that speckle
//! (zero returns, saturated pixels) does not squash the useful range, then
//! scaled to an index 0..=255 and looked up in the jet table below.

use std::sync::LazyLock;

use icu_core::{ColorImage, DepthFrame};

/// The 256-entry jet table: index `i` at `v = i / 255` has
/// `r = 1.5 − |4v − 3|`, `g = 1.5 − |4v − 2|`, `b = 1.5 − |4v − 1|`,
/// each clamped to [0, 1] and scaled to 0..=255 with rounding.
/// Index 0 is dark blue, 255 dark red; no two entries are equal.
pub static JET: LazyLock<[[u8; 3]; 256]> = LazyLock::new(|| {
    let ch = |x: f64| ((1.5 - x.abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut t = [[0u8; 3]; 256];
    for (i, e) in t.iter_mut().enumerate() {
        let v = i as f64 / 255.0;
        *e = [ch(4.0 * v - 3.0), ch(4.0 * v - 2.0), ch(4.0 * v - 1.0)];
    }
    t
});

pub const CLIP_LOW: f64 = 0.01;
pub const CLIP_HIGH: f64 = 0.99;

/// Lower nearest-rank percentile: the element at `floor(q · (n − 1))` of the
/// sorted values.
pub fn percentile_lower(sorted: &[u16], q: f64) -> u16 {
    let i = (q * (sorted.len() - 1) as f64).floor() as usize;
    sorted[i.min(sorted.len() - 1)]
}

/// Per-pixel table indices after clipping and linear scaling. A frame whose
/// clip range collapses to one value maps entirely to index 0.
pub fn colormap_indices(frame: &DepthFrame) -> Vec<u8> {
    let d = frame.depth_mm();
    let mut sorted = d.to_vec();
    sorted.sort_unstable();
    let lo = percentile_lower(&sorted, CLIP_LOW) as u64;
    let hi = percentile_lower(&sorted, CLIP_HIGH) as u64;
    if hi == lo {
        return vec![0; d.len()];
    }
    let span = hi - lo;
    d.iter()
        .map(|&v| {
            let c = (v as u64).clamp(lo, hi) - lo;
            // round half up, in integers so every platform agrees
            ((c * 255 * 2 + span) / (2 * span)) as u8
        })
        .collect()
}

pub fn depth_to_colormap(frame: &DepthFrame) -> ColorImage {
    let px = colormap_indices(frame).into_iter().flat_map(|i| JET[i as usize]).collect();
    ColorImage::new(frame.width(), frame.height(), px).expect("same dimensions as a valid frame")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_injective_and_anchored() {
        let set: std::collections::HashSet<_> = JET.iter().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(JET[0], [0, 0, 128]);
        assert_eq!(JET[255], [128, 0, 0]);
    }

    #[test]
    fn endpoints() {
        let zero = DepthFrame::new(4, 4, vec![0; 16]).unwrap();
        assert!(colormap_indices(&zero).iter().all(|&i| i == 0));
        let two: Vec<u16> = (0..100).map(|i| if i % 2 == 0 { 1000 } else { 2000 }).collect();
        let idx = colormap_indices(&DepthFrame::new(10, 10, two.clone()).unwrap());
        for (d, i) in two.iter().zip(&idx) {
            assert_eq!(*i, if *d == 1000 { 0 } else { 255 });
        }
    }
}
