//! The acceptance suite: one check per criterion, each returning a pass/fail
//! line with the measured values.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use icu_analytics::active::{ensemble_prob, labeled_class_priority};
use icu_analytics::kappa::counts_from_ratings;
use icu_analytics::{
    al_score_labeled, al_score_unlabeled, cluster_boxes, ensemble_weights, expected_calibration_error, fleiss_kappa, iou, vote,
    AuLabel, BBox, BoxAnnotation, BoxLabel, ClassConsensus, ItemConsensus, Kappa, LabeledBox,
};
use icu_core::seal::{nonce_for, payload_digest, seal_payload};
use icu_core::{ActionUnit, CartKey, GrayImage, Modality, PatientSession, PseudonymKey, RecordEnvelope, RecordKey, StorageLayout, TimestampMs};
use icu_edge::sim::render_rgb;
use icu_edge::{Schedule, SensorSimConfig};
use icu_metrics::{
    compute_study_metrics, env_stats, nightly_disruptions, visitation, write_metrics, CountPoint, DayClock, DisruptionRule,
    MetricsConfig, Plugins, VisitRule,
};
use icu_server::ingest::NO_SESSION;
use icu_server::{IngestOutcome, Ingestor, RecordStore, ScrubbedRecord};
use icu_vision::{
    dedup_successive, filter_by_pain_window, read_candidates, run_face_pipeline, ssim, BlobFaceDetector, PipelineConfig,
    DEFAULT_DEDUP_THRESHOLD, PAIN_WINDOW_MS,
};
use rand::seq::SliceRandom as _;
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::Digest as _;

use crate::harness::{run_backlog, run_delivery, BacklogScenario, DeliveryScenario};

const S: i64 = 1_000;
const H: i64 = 3_600_000;
const DAY: i64 = 24 * H;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: u64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<28} {} ({} ms)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed_ms
        )
    }
}

pub const CRITERIA: [(u8, &str); 10] = [
    (1, "zero-loss delivery"),
    (2, "bounded backlog"),
    (3, "fleiss kappa"),
    (4, "calibration error"),
    (5, "ssim and dedup"),
    (6, "face pipeline"),
    (7, "session curation"),
    (8, "active learning"),
    (9, "box analytics"),
    (10, "environment metrics"),
];

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub delivery: DeliveryScenario,
    pub backlog: BacklogScenario,
    /// Scratch space; a temporary directory when unset.
    pub work_dir: Option<PathBuf>,
}

/// Collects failed expectations and the values worth reporting.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn ok(&mut self, cond: bool, what: impl Into<String>) {
        if !cond {
            self.failures.push(what.into());
        }
    }

    fn close(&mut self, what: &str, got: f64, want: f64, tol: f64) {
        if !((got - want).abs() <= tol) {
            self.failures.push(format!("{what}: got {got:e}, want {want:e} ±{tol:e}"));
        }
    }

    fn note(&mut self, n: impl Into<String>) {
        self.notes.push(n.into());
    }

    fn finish(self) -> (bool, String) {
        let passed = self.failures.is_empty();
        let mut parts = self.notes;
        if !passed {
            parts.push(format!("failed: {}", self.failures.join("; ")));
        }
        (passed, parts.join(", "))
    }
}

type CheckResult = Result<Checks, String>;

pub fn run(id: u8, opts: &Options) -> CriterionResult {
    let name = CRITERIA.iter().find(|c| c.0 == id).map_or("unknown", |c| c.1).to_string();
    let started = Instant::now();
    let tmp;
    let root = match &opts.work_dir {
        Some(d) => {
            let d = d.join(format!("criterion-{id:02}"));
            if d.exists() {
                let _ = std::fs::remove_dir_all(&d);
            }
            d
        }
        None => match tempfile::tempdir() {
            Ok(t) => {
                tmp = t;
                tmp.path().to_path_buf()
            }
            Err(e) => return CriterionResult { id, name, passed: false, detail: format!("tempdir: {e}"), elapsed_ms: 0 },
        },
    };
    let outcome = match id {
        1 => delivery(&root, &opts.delivery),
        2 => backlog(&root, &opts.backlog),
        3 => kappa(),
        4 => calibration(),
        5 => similarity(),
        6 => face_pipeline(&root),
        7 => curation(&root),
        8 => active_learning(),
        9 => boxes(),
        10 => metrics(&root),
        _ => Err(format!("no criterion {id}")),
    };
    let (passed, detail) = match outcome {
        Ok(c) => c.finish(),
        Err(e) => (false, format!("error: {e}")),
    };
    CriterionResult { id, name, passed, detail, elapsed_ms: started.elapsed().as_millis() as u64 }
}

/// Runs `only`, or every criterion, in order.
pub fn run_all(only: &[u8], opts: &Options, mut each: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    CRITERIA
        .iter()
        .filter(|(id, _)| only.is_empty() || only.contains(id))
        .map(|&(id, _)| {
            let r = run(id, opts);
            each(&r);
            r
        })
        .collect()
}

fn delivery(root: &Path, sc: &DeliveryScenario) -> CheckResult {
    let r = run_delivery(root, sc).map_err(|e| e.to_string())?;
    let mut c = Checks::default();
    c.note(format!(
        "{} carts, {} enqueued, {} stored, {} outages, {} crash, {} dup, {:.1} s",
        sc.carts,
        r.enqueued,
        r.stored,
        sc.outages.len(),
        r.crashes,
        r.duplicates_in_manifests,
        r.wall_ms as f64 / 1000.0
    ));
    c.ok(sc.carts == 6, "scenario must use 6 carts");
    c.ok(r.enqueued >= 10_000, format!("only {} envelopes enqueued", r.enqueued));
    c.ok(sc.outages.len() == 3 && sc.outages.iter().all(|o| (10..=30).contains(&o.duration_s)), "three 10-30 s outages");
    c.ok(r.crashes == 1, "one agent crash");
    c.ok(r.missing.is_empty(), format!("missing keys {:?}", r.missing));
    c.ok(r.unexpected.is_empty(), format!("unexpected keys {:?}", r.unexpected));
    c.ok(r.enqueued == r.stored, "stored set differs from enqueued set");
    c.ok(r.duplicates_in_manifests == 0, "duplicate manifest entries");
    c.ok(r.quarantined == 0, format!("{} quarantined", r.quarantined));
    c.ok(!r.seq_reused, "a seq was reused after restart");
    c.ok(r.wall_ms < 300_000, "runtime over 5 min");
    Ok(c)
}

fn backlog(root: &Path, sc: &BacklogScenario) -> CheckResult {
    let r = run_backlog(root, sc).map_err(|e| e.to_string())?;
    let mut c = Checks::default();
    c.note(format!(
        "{} sensors over {} s, max pending {}, max age {} ms",
        r.sensors.len(),
        sc.seconds,
        r.max_pending(),
        r.max_age_ms()
    ));
    c.ok(sc.seconds >= 180, "run shorter than 3 min");
    c.ok(r.sensors.len() >= Modality::ALL.len(), "every modality present");
    for (s, p) in &r.sensors {
        c.ok(p.max_pending < 64, format!("{s}: pending {}", p.max_pending));
        c.ok(p.max_age_ms <= 5_000, format!("{s}: age {} ms", p.max_age_ms));
        c.ok(p.enqueued > 0, format!("{s}: nothing enqueued"));
    }
    Ok(c)
}

fn kappa_of(ratings: &[Vec<usize>], cats: usize) -> Result<Kappa, String> {
    let n = ratings[0].len() as u32;
    Ok(fleiss_kappa(&counts_from_ratings(ratings, cats), n).map_err(|e| e.to_string())?.kappa)
}

fn kappa() -> CheckResult {
    let mut c = Checks::default();
    let hand = kappa_of(&[vec![0, 0, 1], vec![1, 1, 1]], 2)?;
    match hand.value() {
        Some(k) => {
            c.close("hand case", k, 0.25, 1e-9);
            c.note(format!("hand {k:.12}"));
        }
        None => c.ok(false, format!("hand case degenerate: {hand:?}")),
    }
    let perfect = kappa_of(&[vec![0, 0, 0], vec![1, 1, 1], vec![2, 2, 2]], 3)?;
    c.ok(perfect.value() == Some(1.0), format!("perfect agreement gave {perfect:?}"));
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b61);
    let ratings: Vec<Vec<usize>> = (0..10_000).map(|_| (0..4).map(|_| rng.gen_range(0..3)).collect()).collect();
    match kappa_of(&ratings, 3)?.value() {
        Some(k) => {
            c.ok(k.abs() < 0.05, format!("random kappa {k}"));
            c.note(format!("random N=10^4 {k:+.4}"));
        }
        None => c.ok(false, "random ratings degenerate"),
    }
    Ok(c)
}

fn calibration() -> CheckResult {
    let mut c = Checks::default();
    let ece = |p: &[(f64, bool)]| expected_calibration_error(p, 10).map_err(|e| e.to_string());
    let hand = ece(&[(0.9, true), (0.9, false), (0.6, true), (0.6, false)])?;
    c.close("hand case", hand, 0.25, 1e-9);
    c.note(format!("hand {hand:.12}"));
    // k predictions at confidence h/k with exactly h hits, for every k ≤ 20
    let mut preds = Vec::new();
    for k in 1..=20usize {
        for h in 0..=k {
            preds.extend((0..k).map(|i| (h as f64 / k as f64, i < h)));
        }
    }
    let selfcal = ece(&preds)?;
    c.close("self-calibrated", selfcal, 0.0, 1e-12);
    c.note(format!("self-calibrated {selfcal:e} over {} predictions", preds.len()));
    Ok(c)
}

fn similarity() -> CheckResult {
    let mut c = Checks::default();
    let img = |w, h, v| GrayImage::filled(w, h, v).map_err(|e| e.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = GrayImage::new(32, 24, (0..32 * 24).map(|_| rng.gen()).collect()).map_err(|e| e.to_string())?;
    let s = |a: &GrayImage, b: &GrayImage| ssim(a, b).map_err(|e| e.to_string());
    let ident = s(&noise, &noise)?;
    c.close("identity", ident, 1.0, 1e-12);
    let black = img(32, 24, 0)?;
    let white = img(32, 24, 255)?;
    let bw = s(&black, &white)?;
    let c1 = icu_vision::C1;
    c.close("0 vs 255 closed form", bw, c1 / (255.0 * 255.0 + c1), 1e-12);
    c.close("0 vs 255", bw, 9.999e-5, 1e-8);
    c.note(format!("identity {ident}, 0 vs 255 {bw:.6e}"));
    for k in [1usize, 2, 7, 25] {
        let frames = vec![noise.clone(); k];
        let kept = dedup_successive(&frames, DEFAULT_DEDUP_THRESHOLD);
        c.ok(kept == vec![0], format!("{k} identical frames kept {kept:?}"));
    }
    Ok(c)
}

fn store_plain(store: &RecordStore, key: RecordKey, ts: TimestampMs, modality: Modality, study: &str, plain: Vec<u8>) -> Result<(), String> {
    store
        .store(&ScrubbedRecord {
            key,
            capture_ts: ts,
            room_id: "r1".into(),
            modality,
            study_id: study.into(),
            payload_hash: payload_digest(&plain),
            plain,
        })
        .map(drop)
        .map_err(|e| e.to_string())
}

fn face_pipeline(root: &Path) -> CheckResult {
    let mut c = Checks::default();
    let store = RecordStore::open(root.join("data"), false).map_err(|e| e.to_string())?;
    let study = "5eed5eed5eed5eed";
    let t0 = 1_767_600_000_000;
    let ticks = 240u64;
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let faces: Vec<u8> = (0..ticks).map(|_| rng.gen_range(0..4)).collect();
    let mut cfg = SensorSimConfig::new(Modality::RgbFrame, "rgb0", 6);
    cfg.scenario.faces = Schedule::per_tick(&faces);
    for t in 0..ticks {
        store_plain(&store, RecordKey::new("c1", "rgb0", t + 1), t0 + t as i64 * S, Modality::RgbFrame, study, render_rgb(&cfg, t).to_payload())?;
    }
    let layout = StorageLayout::new(root.join("data"));
    let out = root.join("candidates");
    let pcfg = PipelineConfig::default();
    let det = BlobFaceDetector::default();
    let run = |pain: &[TimestampMs]| run_face_pipeline(&layout, study, pain, &pcfg, &det, &out).map_err(|e| e.to_string());

    let r = run(&[t0 + 60 * S])?;
    let got: BTreeSet<u64> = read_candidates(&r.output_dir).map_err(|e| e.to_string())?.iter().map(|x| x.seq).collect();
    let want: BTreeSet<u64> = (0..ticks).filter(|&t| faces[t as usize] == 1).map(|t| t + 1).collect();
    c.ok(r.in_pain_window == ticks as usize, format!("{} of {ticks} frames in window", r.in_pain_window));
    c.ok(got == want, format!("crops {} vs {} single-face frames", got.len(), want.len()));
    c.note(format!("{} frames, {} single-face, {} crops", ticks, want.len(), got.len()));

    // the window reaches exactly ±1 h: the first frames sit at the far edge
    // of a report from the past, the last at the edge of one in the future
    let early = run(&[t0 + 4 * S - PAIN_WINDOW_MS])?;
    c.ok(early.in_pain_window == 5, format!("trailing edge kept {} frames, want 5", early.in_pain_window));
    let last = t0 + (ticks as i64 - 1) * S;
    let late = run(&[last - 2 * S + PAIN_WINDOW_MS])?;
    c.ok(late.in_pain_window == 3, format!("leading edge kept {} frames, want 3", late.in_pain_window));
    let p = 10 * H;
    let probe = [p - PAIN_WINDOW_MS - 1, p - PAIN_WINDOW_MS, p, p + PAIN_WINDOW_MS, p + PAIN_WINDOW_MS + 1];
    let kept = filter_by_pain_window(&probe, &[p], PAIN_WINDOW_MS);
    c.ok(kept == probe[1..4].to_vec(), format!("boundary probe kept {kept:?}"));
    c.ok(PAIN_WINDOW_MS == 3_600_000, "pain window is one hour");
    c.note("±3600000 ms inclusive on both edges");
    Ok(c)
}

fn all_files(dir: &Path, out: &mut Vec<PathBuf>) {
    for e in std::fs::read_dir(dir).into_iter().flatten().flatten() {
        let p = e.path();
        if p.is_dir() {
            all_files(&p, out);
        } else {
            out.push(p);
        }
    }
}

fn curation(root: &Path) -> CheckResult {
    let mut c = Checks::default();
    let pkey = PseudonymKey::new(b"acceptance-pseudonym-key".to_vec()).map_err(|e| e.to_string())?;
    let cart = CartKey::new("c1", [9u8; 32]);
    let t0 = 1_767_571_200_000;
    let (t1, t2) = (t0 + 3 * H, t0 + 7 * H);
    let session = |patient: &str, from, to| PatientSession {
        patient_id: patient.into(),
        study_id: pkey.study_id(patient),
        room_id: "r1".into(),
        cart_id: "c1".into(),
        admission_ts: from,
        discharge_ts: to,
    };
    let a = session("MRN-4410-ECHO", t0, t1);
    let b = session("MRN-4410-FOXTROT", t1, t2);
    let store = Arc::new(RecordStore::open(root, false).map_err(|e| e.to_string())?);
    let ing = Ingestor::new(store.clone(), [cart.clone()].into_iter().collect(), &[a.clone(), b.clone()]);

    let mut times: BTreeSet<i64> = (0..60).map(|i| t0 - H + i * 10 * 60 * S).collect();
    for t in [t0, t1, t2] {
        times.extend([t - 1, t, t + 1]);
    }
    let mut expected: BTreeMap<RecordKey, Option<String>> = BTreeMap::new();
    for (i, &ts) in times.iter().enumerate() {
        let key = RecordKey::new("c1", "light0", i as u64 + 1);
        let plain = icu_core::samples::scalar_payload(i as f32);
        let sealed = seal_payload(&plain, "deflate", &cart, nonce_for(&key)).map_err(|e| e.to_string())?;
        let bytes = RecordEnvelope {
            key: key.clone(),
            capture_ts: ts,
            room_id: "r1".into(),
            modality: Modality::Light,
            codec_id: "deflate".into(),
            cipher: sealed.cipher,
            payload: sealed.payload,
            payload_hash: sealed.payload_hash,
        }
        .encode()
        .map_err(|e| e.to_string())?;
        let want = [&a, &b].into_iter().find(|s| s.admission_ts <= ts && ts < s.discharge_ts).map(|s| s.study_id.clone());
        let out = ing.ingest(&bytes).map_err(|e| e.to_string())?;
        // a redelivery is absorbed
        let again = ing.ingest(&bytes).map_err(|e| e.to_string())?;
        match &want {
            Some(_) => c.ok(matches!(out, IngestOutcome::Stored { .. }), format!("ts {ts}: {out:?}")),
            None => c.ok(matches!(&out, IngestOutcome::Quarantined { reason } if reason == NO_SESSION), format!("ts {ts}: {out:?}")),
        }
        c.ok(!matches!(again, IngestOutcome::Stored { .. }), format!("ts {ts}: redelivery stored twice"));
        expected.insert(key, want);
    }

    let layout = store.layout();
    let mut seen: BTreeMap<RecordKey, Option<String>> = BTreeMap::new();
    let mut dup = 0;
    for study in layout.studies().map_err(|e| e.to_string())? {
        for e in layout.partition(&study).map_err(|e| e.to_string())? {
            dup += seen.insert(e.key(), Some(study.clone())).is_some() as usize;
        }
    }
    for q in store.quarantine_entries().map_err(|e| e.to_string())? {
        if let Some(k) = q.key() {
            dup += seen.insert(k, None).is_some() as usize;
        }
    }
    c.ok(dup == 0, format!("{dup} records in more than one place"));
    c.ok(seen == expected, "partition contents differ from the session timeline");
    let at = |ts: i64| {
        let seq = times.iter().position(|&t| t == ts).map_or(0, |p| p as u64 + 1);
        seen.get(&RecordKey::new("c1", "light0", seq)).cloned().flatten()
    };
    let (sa, sb) = (Some(a.study_id.clone()), Some(b.study_id.clone()));
    c.ok(at(t0 - 1).is_none() && at(t0) == sa, "admission boundary");
    c.ok(at(t1 - 1) == sa && at(t1) == sb, "hand-over boundary");
    c.ok(at(t2 - 1) == sb && at(t2).is_none(), "discharge boundary");

    let mut files = Vec::new();
    all_files(root, &mut files);
    let mut leaks = 0;
    for f in &files {
        let name_leak = f.to_string_lossy().contains("MRN-");
        let body = std::fs::read(f).unwrap_or_default();
        let text = String::from_utf8_lossy(&body);
        let body_leak = [&a.patient_id, &b.patient_id].iter().any(|p| text.contains(p.as_str())) || text.contains("MRN-");
        leaks += (name_leak || body_leak) as usize;
    }
    c.ok(leaks == 0, format!("{leaks} files contain a raw patient id"));
    c.note(format!("{} records, {} files scanned, 0 raw ids", expected.len(), files.len()));
    Ok(c)
}

fn share(v: &ClassConsensus, label: bool) -> f64 {
    (if label { v.v1 } else { v.v0 }) / (v.v0 + v.v1)
}

fn active_learning() -> CheckResult {
    let mut c = Checks::default();
    let class = AuLabel::Au(ActionUnit::Au12);
    let mut rng = ChaCha8Rng::seed_from_u64(0xa1);
    let mut maximal = 0;
    let err = |e: icu_analytics::ConsensusError| e.to_string();
    for case in 0..1_000 {
        let votes: Vec<(f64, bool)> = (0..rng.gen_range(1..8)).map(|_| (rng.gen_range(0.01..1.0), rng.gen())).collect();
        let n_models = rng.gen_range(1..5);
        let probs: Vec<f64> = if case % 5 == 0 {
            // a share of the cases sits exactly at maximal uncertainty
            vec![0.5; n_models]
        } else {
            (0..n_models).map(|_| rng.gen_range(0.0..=1.0)).collect()
        };
        let raw: Vec<f64> = (0..n_models).map(|_| rng.gen_range(0.0..1.0)).collect();
        let weights = ensemble_weights(&raw);
        let maps: Vec<BTreeMap<AuLabel, f64>> = probs.iter().map(|&p| BTreeMap::from([(class, p)])).collect();
        let refs: Vec<&BTreeMap<AuLabel, f64>> = maps.iter().collect();
        let p_bar = ensemble_prob(class, &refs, &weights).ok_or("no ensemble probability")?;
        let model = Some((0.5, p_bar));
        let beta = rng.gen_range(0.0..=1.0);
        let cconf = rng.gen_range(0.0..=1.0);
        let extra = rng.gen_range(0.01..1.0);
        let scale = rng.gen_range(0.01..100.0);

        let base = vote(&votes, model).map_err(err)?;
        let mut agree = votes.clone();
        agree.push((extra, base.label));
        let after = vote(&agree, model).map_err(err)?;
        c.ok(
            labeled_class_priority(after.quality, cconf, beta) <= labeled_class_priority(base.quality, cconf, beta) + 1e-12,
            format!("case {case}: agreeing vote raised priority"),
        );
        let mut conflict = votes.clone();
        conflict.push((extra, !base.label));
        let after = vote(&conflict, model).map_err(err)?;
        c.ok(share(&after, base.label) <= share(&base, base.label) + 1e-12, format!("case {case}: conflict raised support"));
        if after.label == base.label {
            c.ok(after.quality <= base.quality + 1e-12, format!("case {case}: conflict raised quality"));
        }

        let scaled: Vec<_> = votes.iter().map(|&(w, l)| (w * scale, l)).collect();
        let scaled_vote = vote(&scaled, Some((0.5 * scale, p_bar))).map_err(err)?;
        c.ok(scaled_vote.label == base.label, format!("case {case}: argmax moved under scaling by {scale}"));

        let un = al_score_unlabeled("item", &refs, &weights, &[class]);
        let item = ItemConsensus { item_id: "item".into(), classes: BTreeMap::from([(class, base)]) };
        let lab = al_score_labeled(&item, &refs, &weights, beta);
        c.ok((0.0..=1.0).contains(&un.priority), format!("case {case}: unlabeled priority {}", un.priority));
        c.ok((0.0..=1.0).contains(&lab.priority), format!("case {case}: labeled priority {}", lab.priority));
        c.ok((un.priority == 1.0) == (p_bar == 0.5), format!("case {case}: p̄ {p_bar} gave priority {}", un.priority));
        maximal += (un.priority == 1.0) as usize;
    }
    c.ok(maximal > 0, "no case reached maximal uncertainty");
    c.note(format!("1000 cases, {maximal} at p̄ = 0.5"));
    Ok(c)
}

fn box_ann(annotator: &str, boxes: &[(f64, f64, f64, f64, BoxLabel)]) -> BoxAnnotation {
    BoxAnnotation {
        annotator_id: annotator.into(),
        item_id: "item".into(),
        boxes: boxes.iter().map(|&(x, y, w, h, label)| LabeledBox { bbox: BBox::new(x, y, w, h), label }).collect(),
        started_ts: 0,
        submitted_ts: 1,
        comment: None,
        skipped: false,
    }
}

fn boxes() -> CheckResult {
    let mut c = Checks::default();
    let v = iou(&BBox::new(0.0, 0.0, 10.0, 10.0), &BBox::new(5.0, 5.0, 10.0, 10.0));
    c.close("IoU hand case", v, 1.0 / 7.0, 1e-9);
    c.note(format!("IoU {v:.9}"));

    let weights: BTreeMap<String, f64> = (0..4).map(|i| (format!("a{i}"), 0.25 + i as f64 * 0.2)).collect();
    let same = [(12.0, 8.0, 30.0, 40.0, BoxLabel::Sitting)];
    let unanimous: Vec<_> = (0..4).map(|i| box_ann(&format!("a{i}"), &same)).collect();
    let u = cluster_boxes("item", &unanimous, &weights, 0.5);
    c.ok(u.clusters.len() == 1, format!("unanimous boxes gave {} clusters", u.clusters.len()));
    c.ok(u.priority == 0.0, format!("unanimous priority {}", u.priority));

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let labels = [BoxLabel::Sitting, BoxLabel::Standing, BoxLabel::Assisted1];
    let mut anns: Vec<BoxAnnotation> = (0..4)
        .map(|i| {
            let bs: Vec<_> = (0..rng.gen_range(1..5))
                .map(|_| (rng.gen_range(0.0..60.0), rng.gen_range(0.0..40.0), rng.gen_range(5.0..30.0), rng.gen_range(5.0..30.0), labels[rng.gen_range(0..3)]))
                .collect();
            box_ann(&format!("a{i}"), &bs)
        })
        .collect();
    let reference = cluster_boxes("item", &anns, &weights, 0.5);
    let original: BTreeMap<String, Vec<LabeledBox>> = anns.iter().map(|a| (a.annotator_id.clone(), a.boxes.clone())).collect();
    let mut differing = 0;
    for _ in 0..100 {
        // both the annotations and the boxes within each are permuted; member
        // indices are mapped back to the original box order before comparing
        anns.shuffle(&mut rng);
        for a in anns.iter_mut() {
            a.boxes.shuffle(&mut rng);
        }
        let mut got = cluster_boxes("item", &anns, &weights, 0.5);
        for m in got.clusters.iter_mut().flat_map(|c| c.members.iter_mut()) {
            let shuffled = &anns.iter().find(|a| a.annotator_id == m.annotator_id).expect("member annotator").boxes[m.box_index];
            m.box_index = original[&m.annotator_id].iter().position(|b| b == shuffled).expect("box present");
        }
        differing += (got != reference) as usize;
    }
    c.ok(differing == 0, format!("{differing} of 100 shuffles changed the clustering"));
    c.note(format!("{} clusters stable over 100 shuffles", reference.clusters.len()));
    Ok(c)
}

fn counts(from: i64, to: i64, bursts: &[(i64, i64)]) -> Vec<CountPoint> {
    (from / S..to / S)
        .map(|s| {
            let ts = s * S;
            CountPoint { ts, count: Some(if bursts.iter().any(|&(a, b)| a <= ts && ts < b) { 2 } else { 1 }) }
        })
        .collect()
}

fn env(from: i64, to: i64, spikes: &[(i64, i64)], base: f64, loud: f64) -> Vec<(TimestampMs, f64)> {
    (from / S..to / S)
        .map(|s| {
            let ts = s * S;
            (ts, if spikes.iter().any(|&(a, b)| a <= ts && ts < b) { loud } else { base })
        })
        .collect()
}

fn metrics(root: &Path) -> CheckResult {
    let mut c = Checks::default();
    let clock = DayClock::default();
    let vis = |b: &[(i64, i64)]| {
        let v = visitation(&counts(0, DAY, b), &VisitRule::default(), &clock);
        (v.day_visits, v.night_visits)
    };
    let ten = 10 * H;
    let late = 22 * H;
    let cases: [(&str, Vec<(i64, i64)>, (u32, u32)); 6] = [
        ("background only", vec![], (0, 0)),
        ("5 min at 10:00", vec![(ten, ten + 300 * S)], (1, 0)),
        ("two 40 s bursts 30 s apart merge", vec![(ten, ten + 40 * S), (ten + 70 * S, ten + 110 * S)], (1, 0)),
        ("59 s is too short", vec![(ten, ten + 59 * S)], (0, 0)),
        ("exactly 60 s", vec![(ten, ten + 60 * S)], (1, 0)),
        ("2 min at 22:00", vec![(late, late + 120 * S)], (0, 1)),
    ];
    for (name, bursts, want) in cases {
        let got = vis(&bursts);
        c.ok(got == want, format!("visitation {name}: {got:?} vs {want:?}"));
    }

    let (from, to) = (DAY + 12 * H, 2 * DAY + 12 * H);
    let two_am = 2 * DAY + 2 * H;
    let quiet = env(from, to, &[], 5.0, 5.0);
    let nights = |l: &[(TimestampMs, f64)], n: &[(TimestampMs, f64)]| -> Vec<u32> {
        nightly_disruptions(l, n, &DisruptionRule::default(), &clock).iter().map(|x| x.disruptions).collect()
    };
    let dcases: [(&str, Vec<(TimestampMs, f64)>, Vec<(TimestampMs, f64)>, u32); 5] = [
        ("quiet night", quiet.clone(), quiet.clone(), 0),
        ("2 min light spike at 02:00", env(from, to, &[(two_am, two_am + 120 * S)], 5.0, 300.0), quiet.clone(), 1),
        ("midday spike", env(from, to, &[(DAY + 13 * H, DAY + 13 * H + 300 * S)], 5.0, 300.0), quiet.clone(), 0),
        ("noise at threshold", quiet.clone(), env(from, to, &[(two_am, two_am + 120 * S)], 40.0, 60.0), 0),
        (
            "two spikes 2 min apart",
            env(from, to, &[(two_am, two_am + 40 * S), (two_am + 160 * S, two_am + 200 * S)], 5.0, 300.0),
            quiet.clone(),
            2,
        ),
    ];
    for (name, l, n, want) in dcases {
        let got = nights(&l, &n);
        c.ok(got == vec![want], format!("disruptions {name}: {got:?} vs [{want}]"));
    }

    // environment windows against brute force
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for round in 0..100 {
        let window = [1_000, 60_000, H, 7_777][round % 4];
        let mut series = |n: usize| {
            let mut v: Vec<(i64, f64)> = (0..n).map(|_| (rng.gen_range(-20 * window..20 * window), rng.gen_range(0.0..120.0))).collect();
            v.sort_by_key(|s| s.0);
            v
        };
        let (noise, light) = (series(150), series(150));
        let got = env_stats(&noise, &light, window);
        let mut bins: BTreeMap<i64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for &(t, v) in &noise {
            bins.entry(t.div_euclid(window)).or_default().0.push(v);
        }
        for &(t, v) in &light {
            bins.entry(t.div_euclid(window)).or_default().1.push(v);
        }
        let covered: usize = got.iter().map(|w| w.sample_count).sum();
        c.ok(covered == 300, format!("round {round}: windows hold {covered} samples"));
        for w in &got {
            let (n, l) = bins.get(&w.start.div_euclid(window)).cloned().unwrap_or_default();
            for (vals, stats) in [(&n, w.noise), (&l, w.light)] {
                match stats {
                    None => c.ok(vals.is_empty(), format!("round {round}: empty stats for a filled window")),
                    Some(st) => {
                        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
                        c.ok(st.count == vals.len() && (st.mean - mean).abs() < 1e-9 && st.max == max, format!("round {round}: window {}", w.start));
                    }
                }
            }
        }
    }

    // rerun determinism over a stored study
    let study = "d373d373d373d373";
    let store = RecordStore::open(root.join("data"), false).map_err(|e| e.to_string())?;
    let mut depth = SensorSimConfig::new(Modality::DepthFrame, "depth0", 12);
    depth.scenario.persons = Schedule { segments: vec![(0, 1), (60, 2), (200, 1)], cycle: None };
    let t0 = DAY + 10 * H;
    for t in 0..300u64 {
        let ts = t0 + t as i64 * S;
        store_plain(&store, RecordKey::new("c1", "depth0", t + 1), ts, Modality::DepthFrame, study, icu_edge::sim::render_depth(&depth, t).to_payload())?;
        let light = icu_core::samples::scalar_payload(if (100..160).contains(&t) { 500.0 } else { 20.0 });
        store_plain(&store, RecordKey::new("c1", "light0", t + 1), ts, Modality::Light, study, light)?;
        store_plain(&store, RecordKey::new("c1", "noise0", t + 1), ts, Modality::Noise, study, icu_core::samples::scalar_payload(45.0))?;
    }
    let layout = StorageLayout::new(root.join("data"));
    let cfg = MetricsConfig::default();
    let plugins = Plugins::default();
    let run = || compute_study_metrics(&layout, study, None, &plugins, &cfg).map_err(|e| e.to_string());
    let (r1, r2) = (run()?, run()?);
    let p1 = write_metrics(&root.join("m1"), study, &r1.points).map_err(|e| e.to_string())?;
    let p2 = write_metrics(&root.join("m2"), study, &r2.points).map_err(|e| e.to_string())?;
    let file_hash = |p: &Path| std::fs::read(p).map(|b| hex::encode(sha2::Sha256::digest(b))).map_err(|e| e.to_string());
    c.ok(!r1.points.is_empty(), "no metric points");
    c.ok(r1.digest == r2.digest, "rerun digests differ");
    c.ok(file_hash(&p1)? == r1.digest && file_hash(&p2)? == r1.digest, "written files do not hash to the digest");
    c.note(format!("11 rule fixtures, 100 env rounds, digest {}", &r1.digest[..12]));
    Ok(c)
}
