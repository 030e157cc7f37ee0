//! Per-study metric computation over the stored partition.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use icu_core::samples::scalar_from_payload;
use icu_core::{ClinicalFeed, DepthFrame, ManifestEntry, Modality, StorageLayout, TimestampMs};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

use crate::env::env_stats;
use crate::plugin::{InferencePlugin, PluginError, PosturePlugin};
use crate::score::{score_series, StubScorePlugin};
use crate::time::DayClock;
use crate::visits::{nightly_disruptions, person_count_series, visitation, CountPoint, DisruptionRule, Period, VisitRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Acuity,
    DeliriumRisk,
    Pain,
    Mobility,
    Noise,
    Light,
    Disruptions,
    VisitationDay,
    VisitationNight,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::Acuity,
        Metric::DeliriumRisk,
        Metric::Pain,
        Metric::Mobility,
        Metric::Noise,
        Metric::Light,
        Metric::Disruptions,
        Metric::VisitationDay,
        Metric::VisitationNight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Acuity => "acuity",
            Metric::DeliriumRisk => "delirium_risk",
            Metric::Pain => "pain",
            Metric::Mobility => "mobility",
            Metric::Noise => "noise",
            Metric::Light => "light",
            Metric::Disruptions => "disruptions",
            Metric::VisitationDay => "visitation_day",
            Metric::VisitationNight => "visitation_night",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub study_id: String,
    pub metric: Metric,
    pub ts: TimestampMs,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub clock: DayClock,
    pub visits: VisitRule,
    pub disruptions: DisruptionRule,
    pub env_window_ms: i64,
    pub mobility_window_ms: i64,
    pub score_interval_ms: i64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            clock: DayClock::default(),
            visits: VisitRule::default(),
            disruptions: DisruptionRule::default(),
            env_window_ms: 3_600_000,
            mobility_window_ms: 3_600_000,
            score_interval_ms: 3_600_000,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        self.clock.validate().map_err(MetricsError::Config)?;
        for (name, v) in [
            ("env_window_ms", self.env_window_ms),
            ("mobility_window_ms", self.mobility_window_ms),
            ("score_interval_ms", self.score_interval_ms),
            ("visits.sample_step_ms", self.visits.sample_step_ms),
            ("disruptions.sample_step_ms", self.disruptions.sample_step_ms),
        ] {
            if v <= 0 {
                return Err(MetricsError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// The plugins a metrics run uses.
pub struct Plugins {
    pub posture: Box<dyn InferencePlugin>,
    pub acuity: Box<dyn InferencePlugin>,
    pub delirium: Box<dyn InferencePlugin>,
}

impl Default for Plugins {
    fn default() -> Self {
        Self {
            posture: Box::new(PosturePlugin::default()),
            acuity: Box::new(StubScorePlugin::acuity()),
            delirium: Box::new(StubScorePlugin::delirium()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("invalid metrics config: {0}")]
    Config(String),
    #[error("reading storage: {0}")]
    Storage(#[from] std::io::Error),
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error("writing {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub study_id: String,
    pub depth_frames: usize,
    pub count_gaps: usize,
    pub noise_samples: usize,
    pub light_samples: usize,
    pub undecodable: usize,
    pub points: Vec<MetricPoint>,
    pub digest: String,
}

/// Entries of one modality from a single sensor, the one with the smallest
/// id, so co-located sensors are not double counted.
fn primary_sensor(mut entries: Vec<ManifestEntry>) -> Vec<ManifestEntry> {
    let Some(first) = entries.iter().map(|e| e.sensor_id.clone()).min() else {
        return entries;
    };
    entries.retain(|e| e.sensor_id == first);
    entries.sort_by(|a, b| (a.capture_ts, a.seq).cmp(&(b.capture_ts, b.seq)));
    entries
}

fn scalar_series(layout: &StorageLayout, study: &str, modality: Modality, bad: &mut usize) -> Result<Vec<(TimestampMs, f64)>, MetricsError> {
    let mut out = Vec::new();
    for e in primary_sensor(layout.partition_of(study, modality)?) {
        let rec = layout.read_record(&e)?;
        match scalar_from_payload(&rec.payload) {
            Ok(v) if v.is_finite() => out.push((e.capture_ts, v as f64)),
            _ => {
                *bad += 1;
                warn!(study, modality = modality.as_str(), seq = e.seq, "undecodable scalar record skipped");
            }
        }
    }
    Ok(out)
}

fn point(study: &str, metric: Metric, ts: TimestampMs, value: f64) -> MetricPoint {
    MetricPoint { study_id: study.into(), metric, ts, value }
}

/// Hourly (by default) mean person count over frames the plugin handled.
fn mobility(study: &str, counts: &[CountPoint], window_ms: i64) -> Vec<MetricPoint> {
    let mut buckets: BTreeMap<i64, (TimestampMs, u64, u64)> = BTreeMap::new();
    for c in counts {
        let Some(n) = c.count else { continue };
        let b = buckets.entry(c.ts.div_euclid(window_ms)).or_insert((c.ts, 0, 0));
        b.0 = b.0.min(c.ts);
        b.1 += n as u64;
        b.2 += 1;
    }
    buckets.into_values().map(|(ts, sum, n)| point(study, Metric::Mobility, ts, sum as f64 / n as f64)).collect()
}

/// Visit counts per local day slot (day visits keyed by date, night visits
/// keyed by the date the night began). Slots with samples but no visits
/// give an explicit zero.
fn visitation_points(study: &str, counts: &[CountPoint], cfg: &MetricsConfig) -> Vec<MetricPoint> {
    let clock = &cfg.clock;
    let slot = |ts: TimestampMs| {
        if clock.is_day(ts) {
            (Period::Day, clock.local_date(ts))
        } else {
            (Period::Night, clock.night_of(ts))
        }
    };
    let mut slots: BTreeMap<(u8, String), (TimestampMs, u32)> = BTreeMap::new();
    let key = |p: Period, d: String| (matches!(p, Period::Night) as u8, d);
    for c in counts {
        let (p, d) = slot(c.ts);
        let e = slots.entry(key(p, d)).or_insert((c.ts, 0));
        e.0 = e.0.min(c.ts);
    }
    for v in visitation(counts, &cfg.visits, clock).visits {
        let (p, d) = slot(v.interval.start);
        slots.entry(key(p, d)).or_insert((v.interval.start, 0)).1 += 1;
    }
    slots
        .into_iter()
        .map(|((night, _), (ts, n))| {
            let metric = if night == 1 { Metric::VisitationNight } else { Metric::VisitationDay };
            point(study, metric, ts, n as f64)
        })
        .collect()
}

/// Every metric for one study. Output is sorted by (metric, ts) and is a
/// pure function of the stored partition, the feed and the config.
pub fn compute_study_metrics(
    layout: &StorageLayout,
    study: &str,
    feed: Option<&ClinicalFeed>,
    plugins: &Plugins,
    cfg: &MetricsConfig,
) -> Result<MetricsReport, MetricsError> {
    cfg.validate()?;
    let mut report = MetricsReport { study_id: study.into(), ..Default::default() };
    let mut points = Vec::new();

    let mut frames = Vec::new();
    for e in primary_sensor(layout.partition_of(study, Modality::DepthFrame)?) {
        let rec = layout.read_record(&e)?;
        match DepthFrame::from_payload(&rec.payload) {
            Ok(f) => frames.push((e.capture_ts, f)),
            Err(err) => {
                report.undecodable += 1;
                warn!(study, seq = e.seq, error = %err, "undecodable depth frame skipped");
            }
        }
    }
    report.depth_frames = frames.len();
    let counts = person_count_series(&frames, plugins.posture.as_ref())?;
    drop(frames);
    report.count_gaps = counts.iter().filter(|c| c.count.is_none()).count();
    points.extend(mobility(study, &counts, cfg.mobility_window_ms));
    points.extend(visitation_points(study, &counts, cfg));

    let noise = scalar_series(layout, study, Modality::Noise, &mut report.undecodable)?;
    let light = scalar_series(layout, study, Modality::Light, &mut report.undecodable)?;
    report.noise_samples = noise.len();
    report.light_samples = light.len();
    for w in env_stats(&noise, &light, cfg.env_window_ms) {
        if let Some(s) = w.noise {
            points.push(point(study, Metric::Noise, s.first_ts, s.mean));
        }
        if let Some(s) = w.light {
            points.push(point(study, Metric::Light, s.first_ts, s.mean));
        }
    }
    for n in nightly_disruptions(&light, &noise, &cfg.disruptions, &cfg.clock) {
        points.push(point(study, Metric::Disruptions, n.first_ts, n.disruptions as f64));
    }

    points.extend(score_series(study, Metric::Acuity, plugins.acuity.as_ref(), feed, cfg.score_interval_ms)?);
    points.extend(score_series(study, Metric::DeliriumRisk, plugins.delirium.as_ref(), feed, cfg.score_interval_ms)?);
    if let Some(feed) = feed {
        let sessions = feed.session_of(study);
        let in_session = |ts: TimestampMs| sessions.iter().any(|s| s.admission_ts <= ts && ts < s.discharge_ts);
        points.extend(
            feed.pain
                .iter()
                .filter(|p| p.study_id == study && p.score.is_finite() && in_session(p.ts))
                .map(|p| point(study, Metric::Pain, p.ts, p.score)),
        );
    }

    points.retain(|p| p.value.is_finite());
    points.sort_by(|a, b| (a.metric, a.ts).cmp(&(b.metric, b.ts)).then(a.value.total_cmp(&b.value)));
    debug!(study, points = points.len(), "metrics computed");
    report.digest = metrics_digest(&points);
    report.points = points;
    Ok(report)
}

fn to_jsonl(points: &[MetricPoint]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in points {
        serde_json::to_writer(&mut out, p).expect("metric point serializes");
        out.push(b'\n');
    }
    out
}

/// Hex SHA-256 of the line-delimited JSON form.
pub fn metrics_digest(points: &[MetricPoint]) -> String {
    hex::encode(Sha256::digest(to_jsonl(points)))
}

/// Replaces `<dir>/<study>.jsonl` atomically.
pub fn write_metrics(dir: &Path, study: &str, points: &[MetricPoint]) -> Result<PathBuf, MetricsError> {
    let err = |path: &Path| {
        let path = path.to_owned();
        move |source| MetricsError::Write { path, source }
    };
    std::fs::create_dir_all(dir).map_err(err(dir))?;
    let path = dir.join(format!("{study}.jsonl"));
    let tmp = dir.join(format!(".{study}.jsonl.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(err(&tmp))?;
    f.write_all(&to_jsonl(points)).and_then(|_| f.sync_all()).map_err(err(&tmp))?;
    std::fs::rename(&tmp, &path).map_err(err(&path))?;
    Ok(path)
}
