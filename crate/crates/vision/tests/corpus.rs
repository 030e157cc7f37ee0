//! The mock detectors and pipelines on the cart simulator's scripted scenes.

use std::sync::Arc;

use icu_core::seal::payload_digest;
use icu_core::{Modality, RecordKey, StorageLayout};
use icu_edge::sim::{face_layout, person_layout, render_depth, render_rgb};
use icu_edge::{Schedule, SensorSimConfig};
use icu_server::{RecordStore, ScrubbedRecord};
use icu_vision::{
    depth_to_colormap, filter_person_frames, filter_single_face, read_candidates, run_depth_pipeline, run_face_pipeline,
    BlobFaceDetector, Detector, PipelineConfig, SilhouetteDetector, PAIN_WINDOW_MS,
};

fn rgb_cfg(faces: &[u8]) -> SensorSimConfig {
    let mut c = SensorSimConfig::new(Modality::RgbFrame, "rgb0", 21);
    c.scenario.faces = Schedule::per_tick(faces);
    c
}

#[test]
fn scripted_face_counts_zero_one_two_one() {
    let cfg = rgb_cfg(&[0, 1, 2, 1]);
    let frames: Vec<_> = (0..4).map(|t| render_rgb(&cfg, t)).collect();
    let (crops, stats) = filter_single_face(&frames, &BlobFaceDetector::default());
    assert_eq!(crops.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 3]);
    assert_eq!((stats.no_detection, stats.multiple, stats.failures), (1, 1, 0));
    for c in &crops {
        // the crop is centred on the rendered face
        let e = face_layout(&cfg, c.index as u64)[0];
        let (cx, cy) = (c.bbox.x as f64 + c.bbox.w as f64 / 2.0, c.bbox.y as f64 + c.bbox.h as f64 / 2.0);
        assert!((cx - e.cx).abs() <= 1.0 && (cy - e.cy).abs() <= 1.0, "{:?} vs {e:?}", c.bbox);
        assert_eq!((c.crop.width(), c.crop.height()), (c.bbox.w, c.bbox.h));
    }
}

#[test]
fn detectors_recover_scripted_counts() {
    let counts: Vec<u8> = (0..120u32).map(|i| ((i * 7 + i / 5) % 5) as u8).collect();
    let rgb = rgb_cfg(&counts);
    let mut depth = SensorSimConfig::new(Modality::DepthFrame, "depth0", 22);
    depth.scenario.persons = Schedule::per_tick(&counts);
    let face = BlobFaceDetector::default();
    let person = SilhouetteDetector::default();
    for (t, &n) in counts.iter().enumerate() {
        assert_eq!(face.detect(&render_rgb(&rgb, t as u64)).unwrap().len(), n as usize, "rgb tick {t}");
        let want = person_layout(&depth, t as u64).len();
        let got = person.detect(&depth_to_colormap(&render_depth(&depth, t as u64))).unwrap().len();
        assert_eq!(got, want, "depth tick {t}");
    }
    let frames: Vec<_> = (0..counts.len() as u64).map(|t| render_rgb(&rgb, t)).collect();
    let (crops, _) = filter_single_face(&frames, &face);
    let want: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == 1).collect();
    assert_eq!(crops.iter().map(|c| c.index).collect::<Vec<_>>(), want);
    let maps: Vec<_> = (0..counts.len() as u64).map(|t| depth_to_colormap(&render_depth(&depth, t))).collect();
    let (kept, _) = filter_person_frames(&maps, &person);
    let want: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] >= 1).collect();
    assert_eq!(kept, want);
}

fn store_frames(store: &RecordStore, cfg: &SensorSimConfig, study: &str, ticks: u64, t0: i64) {
    for t in 0..ticks {
        let plain = match cfg.modality {
            Modality::RgbFrame => render_rgb(cfg, t).to_payload(),
            _ => render_depth(cfg, t).to_payload(),
        };
        store
            .store(&ScrubbedRecord {
                key: RecordKey::new("c1", &cfg.sensor_id, t + 1),
                capture_ts: t0 + t as i64 * 1_000,
                room_id: "r1".into(),
                modality: cfg.modality,
                study_id: study.into(),
                payload_hash: payload_digest(&plain),
                plain,
            })
            .unwrap();
    }
}

#[test]
fn batch_pipelines_write_candidates_and_are_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(RecordStore::open(dir.path().join("data"), false).unwrap());
    let study = "00112233aabbccdd";
    let t0 = 1_700_000_000_000;
    let faces = [0u8, 1, 2, 1, 1, 0];
    let rgb = rgb_cfg(&faces);
    store_frames(&store, &rgb, study, 600, t0);
    let mut depth = SensorSimConfig::new(Modality::DepthFrame, "depth0", 5);
    // long still stretches so dedup has something to remove
    depth.scenario.persons = Schedule { segments: vec![(0, 1), (20, 0), (30, 2), (50, 1)], cycle: None };
    store_frames(&store, &depth, study, 60, t0);

    let layout = StorageLayout::new(dir.path().join("data"));
    let out = dir.path().join("candidates");
    let cfg = PipelineConfig::default();
    // one pain report at +250 s: frames up to +3850 s qualify, so all 600
    let pain = [t0 + 250_000];
    let face = BlobFaceDetector::default();
    let r = run_face_pipeline(&layout, study, &pain, &cfg, &face, &out).unwrap();
    assert_eq!((r.records, r.in_pain_window, r.extracted), (600, 600, 600));
    let singles = (0..600).filter(|i| faces[i % faces.len()] == 1).count();
    assert_eq!(r.candidates, singles);
    let listed = read_candidates(&r.output_dir).unwrap();
    assert_eq!(listed.len(), singles);
    for c in &listed {
        assert_eq!(faces[(c.seq as usize - 1) % faces.len()], 1);
        assert!(r.output_dir.join(&c.file).exists());
        let png = image::open(r.output_dir.join(&c.file)).unwrap().to_rgb8();
        let crop = c.crop.unwrap();
        assert_eq!((png.width() as usize, png.height() as usize), (crop.w, crop.h));
    }

    // a pain report far from the frames keeps only its window, inclusive
    let late = [t0 + 599_000 + PAIN_WINDOW_MS];
    let r2 = run_face_pipeline(&layout, study, &late, &cfg, &face, &out).unwrap();
    assert_eq!(r2.in_pain_window, 1);

    let d1 = run_depth_pipeline(&layout, study, &cfg, &SilhouetteDetector::default(), &out).unwrap();
    assert_eq!(d1.records, 60);
    assert_eq!(d1.detection.no_detection, 10);
    assert!(d1.deduplicated > 0 && d1.candidates >= 3, "{d1:?}");
    let first = std::fs::read(d1.output_dir.join("candidates.jsonl")).unwrap();
    let d2 = run_depth_pipeline(&layout, study, &cfg, &SilhouetteDetector::default(), &out).unwrap();
    assert_eq!(d1, d2);
    assert_eq!(first, std::fs::read(d2.output_dir.join("candidates.jsonl")).unwrap());
}
