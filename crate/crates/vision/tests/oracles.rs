//! Selection, colormap and similarity checked against brute-force oracles.

use icu_core::{DepthFrame, GrayImage};
use icu_vision::{
    colormap_indices, dedup_successive, depth_to_colormap, extract_frames, filter_by_pain_window, percentile_lower, ssim,
    PAIN_WINDOW_MS,
};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

#[test]
fn pain_window_matches_scan_on_random_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let frames: Vec<i64> = (0..1_000).map(|_| rng.gen_range(0..50 * PAIN_WINDOW_MS)).collect();
        let mut pain: Vec<i64> = (0..rng.gen_range(0..30)).map(|_| rng.gen_range(0..50 * PAIN_WINDOW_MS)).collect();
        // every reported time also probes its exact edges
        let mut probes = frames.clone();
        for &p in &pain {
            probes.extend([p - PAIN_WINDOW_MS - 1, p - PAIN_WINDOW_MS, p, p + PAIN_WINDOW_MS, p + PAIN_WINDOW_MS + 1]);
        }
        let want: Vec<i64> = probes
            .iter()
            .copied()
            .filter(|&t| pain.iter().any(|&p| (t - p).abs() <= PAIN_WINDOW_MS))
            .collect();
        assert_eq!(filter_by_pain_window(&probes, &pain, PAIN_WINDOW_MS), want);
        pain.reverse();
        assert_eq!(filter_by_pain_window(&probes, &pain, PAIN_WINDOW_MS), want);
    }
}

#[test]
fn jittered_resampling_matches_bucketing() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for fps in [1.0, 0.5, 0.25, 2.0] {
        let mut t = 1_000_000i64;
        let ts: Vec<i64> = (0..300)
            .map(|_| {
                t += rng.gen_range(700..1_300);
                t
            })
            .collect();
        // oracle: group by bucket number, take the earliest of each group
        let period = 1000.0 / fps;
        let mut firsts = std::collections::BTreeMap::new();
        for (i, &x) in ts.iter().enumerate() {
            firsts.entry(((x - ts[0]) as f64 / period).floor() as i64).or_insert(i);
        }
        let want: Vec<usize> = firsts.into_values().collect();
        assert_eq!(extract_frames(&ts, fps).unwrap(), want, "fps {fps}");
    }
}

#[test]
fn outliers_are_clipped_to_p99() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100 * 100;
    let base: Vec<u16> = (0..n).map(|_| rng.gen_range(800..4_000)).collect();
    let mut noisy = base.clone();
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    for &i in &idx[..n / 100] {
        noisy[i] = u16::MAX;
    }
    let mut sorted = noisy.clone();
    sorted.sort_unstable();
    let p99 = percentile_lower(&sorted, 0.99);
    assert!(p99 < u16::MAX);
    let replaced: Vec<u16> = noisy.iter().map(|&d| if d == u16::MAX { p99 } else { d }).collect();
    let a = DepthFrame::new(100, 100, noisy).unwrap();
    let b = DepthFrame::new(100, 100, replaced).unwrap();
    assert_eq!(depth_to_colormap(&a), depth_to_colormap(&b));
    // and the clipped range spans the whole table
    let idx = colormap_indices(&a);
    assert_eq!(idx.iter().min(), Some(&0));
    assert_eq!(idx.iter().max(), Some(&255));
}

#[test]
fn constant_depth_is_one_color() {
    let f = DepthFrame::new(5, 3, vec![2_345; 15]).unwrap();
    let img = depth_to_colormap(&f);
    assert!(img.pixels().chunks_exact(3).all(|p| p == &img.pixels()[..3]));
}

/// Straightforward restatement of the dedup rule.
fn dedup_reference(frames: &[GrayImage], thr: f64) -> Vec<usize> {
    let mut kept = vec![];
    let mut last: Option<&GrayImage> = None;
    for (i, f) in frames.iter().enumerate() {
        let dup = last.is_some_and(|l| ssim(l, f).unwrap() >= thr);
        if !dup {
            kept.push(i);
            last = Some(f);
        }
    }
    kept
}

fn gray(w: usize, h: usize) -> impl Strategy<Value = GrayImage> {
    prop::collection::vec(any::<u8>(), w * h).prop_map(move |p| GrayImage::new(w, h, p).unwrap())
}

/// Sequences with runs of near-identical frames so both branches fire.
fn sequence() -> impl Strategy<Value = Vec<GrayImage>> {
    prop::collection::vec((gray(6, 5), 1usize..4, 0u8..3), 1..12).prop_map(|runs| {
        let mut out = vec![];
        for (img, reps, jitter) in runs {
            for r in 0..reps {
                let px = img.pixels().iter().map(|&v| v.saturating_add(jitter * r as u8)).collect();
                out.push(GrayImage::new(6, 5, px).unwrap());
            }
        }
        out
    })
}

proptest! {
    #[test]
    fn ssim_is_symmetric_bounded_and_reflexive(a in gray(7, 4), b in gray(7, 4)) {
        let ab = ssim(&a, &b).unwrap();
        prop_assert_eq!(ab, ssim(&b, &a).unwrap());
        prop_assert!(ab.abs() <= 1.0);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn dedup_matches_reference_and_is_prefix_stable(frames in sequence(), thr in 0.5f64..0.999, cut in 0usize..40) {
        let got = dedup_successive(&frames, thr);
        prop_assert_eq!(&got, &dedup_reference(&frames, thr));
        let cut = cut.min(frames.len());
        let prefix = dedup_successive(&frames[..cut], thr);
        prop_assert_eq!(&got[..prefix.len()], &prefix[..]);
    }

    #[test]
    fn identical_runs_keep_one(img in gray(4, 4), k in 1usize..20) {
        prop_assert_eq!(dedup_successive(&vec![img; k], 0.95), vec![0]);
    }

    #[test]
    fn pain_window_is_order_free(frames in prop::collection::vec(0i64..100_000, 0..50),
                                 mut pain in prop::collection::vec(0i64..100_000, 0..10),
                                 w in 0i64..20_000) {
        let a = filter_by_pain_window(&frames, &pain, w);
        pain.sort_unstable_by(|x, y| y.cmp(x));
        prop_assert_eq!(a, filter_by_pain_window(&frames, &pain, w));
    }
}
