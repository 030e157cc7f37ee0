use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use icu_core::{ActionUnit, TimestampMs};
use serde::{Deserialize, Serialize};

/// One term of the face annotation vocabulary: the twelve action units plus
/// three free labels. "No particular expression" is the empty label set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AuLabel {
    Au(ActionUnit),
    Smile,
    WrinkledForehead,
    Unclear,
}

impl AuLabel {
    pub const ALL: [AuLabel; 15] = [
        AuLabel::Au(ActionUnit::Au4),
        AuLabel::Au(ActionUnit::Au6),
        AuLabel::Au(ActionUnit::Au7),
        AuLabel::Au(ActionUnit::Au9),
        AuLabel::Au(ActionUnit::Au10),
        AuLabel::Au(ActionUnit::Au12),
        AuLabel::Au(ActionUnit::Au20),
        AuLabel::Au(ActionUnit::Au24),
        AuLabel::Au(ActionUnit::Au25),
        AuLabel::Au(ActionUnit::Au26),
        AuLabel::Au(ActionUnit::Au27),
        AuLabel::Au(ActionUnit::Au43),
        AuLabel::Smile,
        AuLabel::WrinkledForehead,
        AuLabel::Unclear,
    ];
}

impl fmt::Display for AuLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuLabel::Au(au) => write!(f, "AU{}", au.number()),
            AuLabel::Smile => f.write_str("smile"),
            AuLabel::WrinkledForehead => f.write_str("wrinkled_forehead"),
            AuLabel::Unclear => f.write_str("unclear"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for AuLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "smile" => Ok(AuLabel::Smile),
            "wrinkled_forehead" => Ok(AuLabel::WrinkledForehead),
            "unclear" => Ok(AuLabel::Unclear),
            _ => s
                .strip_prefix("AU")
                .and_then(|n| n.parse::<u8>().ok())
                .and_then(ActionUnit::from_number)
                .map(AuLabel::Au)
                .ok_or_else(|| UnknownLabel(s.to_owned())),
        }
    }
}

impl From<AuLabel> for String {
    fn from(l: AuLabel) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for AuLabel {
    type Error = UnknownLabel;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnnotationError {
    #[error("submitted_ts {submitted} precedes started_ts {started}")]
    Timing { started: TimestampMs, submitted: TimestampMs },
    #[error("empty {0}")]
    EmptyField(&'static str),
    #[error("box {index} lies outside the {width}x{height} image")]
    OutOfBounds { index: usize, width: u32, height: u32 },
    #[error("probability {0} is outside [0, 1]")]
    Probability(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuAnnotation {
    pub annotator_id: String,
    pub item_id: String,
    pub labels: Vec<AuLabel>,
    pub started_ts: TimestampMs,
    pub submitted_ts: TimestampMs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    #[serde(default)]
    pub skipped: bool,
}

fn check_common(annotator: &str, item: &str, started: TimestampMs, submitted: TimestampMs) -> Result<(), AnnotationError> {
    if annotator.is_empty() {
        return Err(AnnotationError::EmptyField("annotator_id"));
    }
    if item.is_empty() {
        return Err(AnnotationError::EmptyField("item_id"));
    }
    if submitted < started {
        return Err(AnnotationError::Timing { started, submitted });
    }
    Ok(())
}

impl AuAnnotation {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        check_common(&self.annotator_id, &self.item_id, self.started_ts, self.submitted_ts)
    }

    /// Binary presence of `label`.
    pub fn has(&self, label: AuLabel) -> bool {
        self.labels.contains(&label)
    }

    pub fn duration_ms(&self) -> i64 {
        self.submitted_ts - self.started_ts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxLabel {
    Sitting,
    Standing,
    #[serde(rename = "assisted_1")]
    Assisted1,
    #[serde(rename = "assisted_2")]
    Assisted2,
    AssistedWheelchair,
    AssistedWalker,
}

/// Axis-aligned box in image pixels: origin top-left, `w`/`h` extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub label: BoxLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub annotator_id: String,
    pub item_id: String,
    pub boxes: Vec<LabeledBox>,
    pub started_ts: TimestampMs,
    pub submitted_ts: TimestampMs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    #[serde(default)]
    pub skipped: bool,
}

impl BoxAnnotation {
    /// Checks timing and that every box lies within a `width`x`height` image.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), AnnotationError> {
        check_common(&self.annotator_id, &self.item_id, self.started_ts, self.submitted_ts)?;
        for (index, b) in self.boxes.iter().enumerate() {
            let bb = b.bbox;
            let inside = bb.is_valid() && bb.x >= 0.0 && bb.y >= 0.0 && bb.x + bb.w <= width as f64 && bb.y + bb.h <= height as f64;
            if !inside {
                return Err(AnnotationError::OutOfBounds { index, width, height });
            }
        }
        Ok(())
    }
}

/// Per-class probabilities of one model for one face item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuPrediction {
    pub model_id: String,
    pub item_id: String,
    pub probs: BTreeMap<AuLabel, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxProposal {
    pub bbox: BBox,
    pub label: BoxLabel,
    pub confidence: f64,
}

/// Box proposals of one model for one depth item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub model_id: String,
    pub item_id: String,
    pub proposals: Vec<BoxProposal>,
}

fn check_prob(p: f64) -> Result<(), AnnotationError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(AnnotationError::Probability(p))
    }
}

impl AuPrediction {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        self.probs.values().try_for_each(|&p| check_prob(p))
    }
}

impl BoxPrediction {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        self.proposals.iter().try_for_each(|p| check_prob(p.confidence))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorQuality {
    pub annotator_id: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveLearningScore {
    pub item_id: String,
    /// Per-class (or per-cluster) priorities, keyed by a display name.
    pub per_class: BTreeMap<String, f64>,
    /// Mean of `per_class`.
    pub priority: f64,
}

impl ActiveLearningScore {
    pub fn from_parts(item_id: impl Into<String>, per_class: BTreeMap<String, f64>) -> Self {
        let priority = if per_class.is_empty() {
            0.0
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        Self {
            item_id: item_id.into(),
            per_class,
            priority,
        }
    }
}
