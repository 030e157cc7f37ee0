//! Batch pipelines over one study's stored partition. Each run replaces
//! `<out>/<pipeline>/<study_id>/` with the candidate PNGs and a
//! `candidates.jsonl` manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use icu_core::{ColorImage, DepthFrame, ManifestEntry, Modality, StorageLayout, TimestampMs};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::colormap::depth_to_colormap;
use crate::detect::{filter_person_frames, filter_single_face, BlobFaceDetector, Detection, Detector, FilterStats, PixelBox, SilhouetteDetector};
use crate::select::{extract_frames, filter_by_pain_window, SelectError, PAIN_WINDOW_MS};
use crate::ssim::{dedup_successive, DEFAULT_DEDUP_THRESHOLD};

pub const MANIFEST_FILE: &str = "candidates.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pain_window_ms: i64,
    pub fps: f64,
    pub dedup_threshold: f64,
    pub face: BlobFaceDetector,
    pub person: SilhouetteDetector,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pain_window_ms: PAIN_WINDOW_MS,
            fps: 1.0,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            face: BlobFaceDetector::default(),
            person: SilhouetteDetector::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error("writing {path}: {message}")]
    Encode { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_owned(), source }
}

/// One annotation candidate as listed in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub frame_id: String,
    pub pipeline: String,
    pub cart_id: String,
    pub sensor_id: String,
    pub seq: u64,
    pub capture_ts: TimestampMs,
    /// Image file, relative to the manifest.
    pub file: String,
    /// Crop of the source frame, for face candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<PixelBox>,
    /// Detector output on the whole frame, for depth candidates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detections: Vec<Detection>,
}

/// Frame counts after each stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub pipeline: String,
    pub study_id: String,
    pub records: usize,
    pub in_pain_window: usize,
    pub extracted: usize,
    pub undecodable: usize,
    pub detection: FilterStats,
    pub deduplicated: usize,
    pub candidates: usize,
    pub output_dir: PathBuf,
}

fn frame_id(e: &ManifestEntry) -> String {
    format!("{}_{}_{}", e.cart_id, e.sensor_id, e.seq)
}

fn fresh_dir(dir: &Path) -> Result<(), PipelineError> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_png(path: &Path, img: &ColorImage) -> Result<(), PipelineError> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| PipelineError::Encode {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn write_manifest(dir: &Path, items: &[Candidate]) -> Result<(), PipelineError> {
    let path = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io_err(&tmp))?);
    for c in items {
        serde_json::to_writer(&mut f, c).expect("candidate serializes");
        f.write_all(b"\n").map_err(io_err(&tmp))?;
    }
    f.into_inner().map_err(|e| e.into_error()).and_then(|f| f.sync_all()).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, &path).map_err(io_err(&path))
}

pub fn read_candidates(dir: &Path) -> Result<Vec<Candidate>, PipelineError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| PipelineError::Io {
                path: path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

/// Reads and decodes the payloads of `entries`; failures are logged, counted
/// and skipped.
fn decode<T>(layout: &StorageLayout, entries: Vec<ManifestEntry>, parse: impl Fn(&[u8]) -> Option<T>) -> (Vec<(ManifestEntry, T)>, usize) {
    let mut bad = 0;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        match layout.read_record(&e).ok().and_then(|env| parse(&env.payload)) {
            Some(v) => out.push((e, v)),
            None => {
                warn!(record = %frame_id(&e), "unreadable frame; skipping");
                bad += 1;
            }
        }
    }
    (out, bad)
}

fn partition(layout: &StorageLayout, study_id: &str, m: Modality) -> Result<Vec<ManifestEntry>, PipelineError> {
    layout.partition_of(study_id, m).map_err(io_err(layout.root()))
}

/// RGB frames near pain reports → resample → single-face crops.
pub fn run_face_pipeline(
    layout: &StorageLayout,
    study_id: &str,
    pain_ts: &[TimestampMs],
    cfg: &PipelineConfig,
    detector: &dyn Detector,
    out_root: &Path,
) -> Result<PipelineReport, PipelineError> {
    let entries = partition(layout, study_id, Modality::RgbFrame)?;
    let records = entries.len();
    let ts: Vec<_> = entries.iter().map(|e| e.capture_ts).collect();
    let in_window = filter_by_pain_window(&ts, pain_ts, cfg.pain_window_ms);
    // entries are time ordered, so the surviving timestamps pick out a subsequence
    let mut keep = in_window.iter().peekable();
    let windowed: Vec<ManifestEntry> = entries
        .into_iter()
        .filter(|e| {
            let hit = keep.peek().is_some_and(|&&t| t == e.capture_ts);
            if hit {
                keep.next();
            }
            hit
        })
        .collect();
    let in_pain_window = windowed.len();
    let picked = extract_frames(&windowed.iter().map(|e| e.capture_ts).collect::<Vec<_>>(), cfg.fps)?;
    let extracted_entries: Vec<_> = picked.iter().map(|&i| windowed[i].clone()).collect();
    let extracted = extracted_entries.len();
    let (frames, undecodable) = decode(layout, extracted_entries, |b| ColorImage::from_payload(b).ok());
    let images: Vec<ColorImage> = frames.iter().map(|(_, f)| f.clone()).collect();
    let (crops, detection) = filter_single_face(&images, detector);

    let dir = out_root.join("face").join(study_id);
    fresh_dir(&dir)?;
    let mut items = Vec::with_capacity(crops.len());
    for c in crops {
        let e = &frames[c.index].0;
        let id = frame_id(e);
        let file = format!("{id}.png");
        write_png(&dir.join(&file), &c.crop)?;
        items.push(Candidate {
            frame_id: id,
            pipeline: "face".into(),
            cart_id: e.cart_id.clone(),
            sensor_id: e.sensor_id.clone(),
            seq: e.seq,
            capture_ts: e.capture_ts,
            file,
            crop: Some(c.bbox),
            detections: Vec::new(),
        });
    }
    write_manifest(&dir, &items)?;
    let report = PipelineReport {
        pipeline: "face".into(),
        study_id: study_id.into(),
        records,
        in_pain_window,
        extracted,
        undecodable,
        detection,
        deduplicated: 0,
        candidates: items.len(),
        output_dir: dir,
    };
    info!(?report, "face pipeline done");
    Ok(report)
}

/// Depth frames → colormaps → person filter → near-duplicate removal.
pub fn run_depth_pipeline(
    layout: &StorageLayout,
    study_id: &str,
    cfg: &PipelineConfig,
    detector: &dyn Detector,
    out_root: &Path,
) -> Result<PipelineReport, PipelineError> {
    let entries = partition(layout, study_id, Modality::DepthFrame)?;
    let records = entries.len();
    let picked = extract_frames(&entries.iter().map(|e| e.capture_ts).collect::<Vec<_>>(), cfg.fps)?;
    let entries: Vec<_> = picked.iter().map(|&i| entries[i].clone()).collect();
    let extracted = entries.len();
    let (frames, undecodable) = decode(layout, entries, |b| DepthFrame::from_payload(b).ok().map(|d| depth_to_colormap(&d)));
    let maps: Vec<ColorImage> = frames.iter().map(|(_, m)| m.clone()).collect();
    let (with_person, detection) = filter_person_frames(&maps, detector);
    let gray: Vec<_> = with_person.iter().map(|&i| maps[i].to_gray()).collect();
    let kept = dedup_successive(&gray, cfg.dedup_threshold);
    let deduplicated = with_person.len() - kept.len();

    let dir = out_root.join("depth").join(study_id);
    fresh_dir(&dir)?;
    let mut items = Vec::with_capacity(kept.len());
    for k in kept {
        let i = with_person[k];
        let e = &frames[i].0;
        let id = frame_id(e);
        let file = format!("{id}.png");
        write_png(&dir.join(&file), &maps[i])?;
        items.push(Candidate {
            frame_id: id,
            pipeline: "depth".into(),
            cart_id: e.cart_id.clone(),
            sensor_id: e.sensor_id.clone(),
            seq: e.seq,
            capture_ts: e.capture_ts,
            file,
            crop: None,
            detections: detector.detect(&maps[i]).unwrap_or_default(),
        });
    }
    write_manifest(&dir, &items)?;
    let report = PipelineReport {
        pipeline: "depth".into(),
        study_id: study_id.into(),
        records,
        in_pain_window: records,
        extracted,
        undecodable,
        detection,
        deduplicated,
        candidates: items.len(),
        output_dir: dir,
    };
    info!(?report, "depth pipeline done");
    Ok(report)
}
