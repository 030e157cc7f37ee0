//! The inference plugin boundary and its deterministic built-ins.
//!
//! Real models plug in behind `InferencePlugin`; the mocks here are pixel
//! rules matched to the cart simulator so every downstream path is testable.

use std::collections::BTreeMap;

use icu_core::image::luma;
use icu_core::{ActionUnit, ColorImage, DepthFrame, TimestampMs};
use icu_vision::{depth_to_colormap, BlobFaceDetector, Detection, Detector, SilhouetteDetector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginKind {
    FaceDetect,
    AuDetect,
    PostureDetect,
    Acuity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginInfo {
    pub name: String,
    pub version: String,
    pub kind: PluginKind,
}

pub enum PluginInput<'a> {
    Image(&'a ColorImage),
    Depth(&'a DepthFrame),
    /// Named clinical variables of one patient, evaluated at `at`.
    Vitals {
        vitals: &'a BTreeMap<&'a str, Vec<(TimestampMs, f64)>>,
        at: TimestampMs,
    },
}

impl PluginInput<'_> {
    fn name(&self) -> &'static str {
        match self {
            PluginInput::Image(_) => "image",
            PluginInput::Depth(_) => "depth",
            PluginInput::Vitals { .. } => "vitals",
        }
    }
}

/// Named scores (probabilities or a risk value) and any detections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PluginOutput {
    pub scores: BTreeMap<String, f64>,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PluginError {
    #[error("plugin {name} is {got:?}, expected {expected:?}")]
    WrongKind { name: String, expected: PluginKind, got: PluginKind },
    #[error("plugin {name} does not accept {input} input")]
    WrongInput { name: String, input: &'static str },
    #[error("plugin {name} failed: {message}")]
    Failed { name: String, message: String },
}

/// Same input, same output: plugins must be pure.
pub trait InferencePlugin: Send + Sync {
    fn info(&self) -> PluginInfo;
    fn infer(&self, input: &PluginInput<'_>) -> Result<PluginOutput, PluginError>;
}

pub(crate) fn require_kind(p: &dyn InferencePlugin, kind: PluginKind) -> Result<(), PluginError> {
    let info = p.info();
    if info.kind != kind {
        return Err(PluginError::WrongKind { name: info.name, expected: kind, got: info.kind });
    }
    Ok(())
}

fn wrong_input(name: &str, input: &PluginInput<'_>) -> PluginError {
    PluginError::WrongInput { name: name.into(), input: input.name() }
}

fn info(name: &str, kind: PluginKind) -> PluginInfo {
    PluginInfo { name: name.into(), version: env!("CARGO_PKG_VERSION").into(), kind }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FaceDetectPlugin(pub BlobFaceDetector);

impl InferencePlugin for FaceDetectPlugin {
    fn info(&self) -> PluginInfo {
        info("blob-face", PluginKind::FaceDetect)
    }

    fn infer(&self, input: &PluginInput<'_>) -> Result<PluginOutput, PluginError> {
        let PluginInput::Image(img) = input else {
            return Err(wrong_input("blob-face", input));
        };
        let detections = self.0.detect(img).map_err(|e| PluginError::Failed { name: "blob-face".into(), message: e.0 })?;
        Ok(PluginOutput { detections, ..Default::default() })
    }
}

/// Person detection on a depth frame, through its colormap.
#[derive(Clone, Copy, Debug, Default)]
pub struct PosturePlugin(pub SilhouetteDetector);

impl InferencePlugin for PosturePlugin {
    fn info(&self) -> PluginInfo {
        info("silhouette-posture", PluginKind::PostureDetect)
    }

    fn infer(&self, input: &PluginInput<'_>) -> Result<PluginOutput, PluginError> {
        let PluginInput::Depth(frame) = input else {
            return Err(wrong_input("silhouette-posture", input));
        };
        let detections = self
            .0
            .detect(&depth_to_colormap(frame))
            .map_err(|e| PluginError::Failed { name: "silhouette-posture".into(), message: e.0 })?;
        Ok(PluginOutput { detections, ..Default::default() })
    }
}

/// Action-unit mock for face crops.
///
/// Only pixels lying between the first and last bright (luma ≥ 180) pixel
/// of their row count, so background in the crop corners is ignored. In the
/// upper half, lid-grey pixels with no dark pupil pixels mean closed eyes
/// (AU43). In the lower half, dark-red mouth pixels mean parted lips and a
/// dropped jaw (AU25, AU26). Every other AU is 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockAuPlugin;

const LID: [u8; 3] = [150, 140, 130];
const MOUTH: [u8; 3] = [60, 20, 20];
const NEAR: i32 = 12;
const MIN_PIXELS: usize = 2;

fn near(p: &[u8], c: [u8; 3]) -> bool {
    p.iter().zip(c).all(|(&a, b)| (a as i32 - b as i32).abs() <= NEAR)
}

impl InferencePlugin for MockAuPlugin {
    fn info(&self) -> PluginInfo {
        info("mock-au", PluginKind::AuDetect)
    }

    fn infer(&self, input: &PluginInput<'_>) -> Result<PluginOutput, PluginError> {
        let PluginInput::Image(img) = input else {
            return Err(wrong_input("mock-au", input));
        };
        let (w, h) = (img.width(), img.height());
        let (mut lid, mut dark, mut mouth) = (0usize, 0usize, 0usize);
        for y in 0..h {
            let row = &img.pixels()[y * w * 3..(y + 1) * w * 3];
            let bright: Vec<usize> = (0..w).filter(|&x| luma(row[3 * x], row[3 * x + 1], row[3 * x + 2]) >= 180).collect();
            let (Some(&x0), Some(&x1)) = (bright.first(), bright.last()) else {
                continue;
            };
            for x in x0 + 1..x1 {
                let p = &row[3 * x..3 * x + 3];
                if 2 * y < h {
                    if near(p, LID) {
                        lid += 1;
                    } else if luma(p[0], p[1], p[2]) < 80 {
                        dark += 1;
                    }
                } else if near(p, MOUTH) {
                    mouth += 1;
                }
            }
        }
        let closed = lid >= MIN_PIXELS && dark == 0;
        let open_mouth = mouth >= MIN_PIXELS;
        let scores = ActionUnit::ALL
            .iter()
            .map(|au| {
                let on = match au {
                    ActionUnit::Au43 => closed,
                    ActionUnit::Au25 | ActionUnit::Au26 => open_mouth,
                    _ => false,
                };
                (au.to_string(), if on { 1.0 } else { 0.0 })
            })
            .collect();
        Ok(PluginOutput { scores, ..Default::default() })
    }
}

/// Per-AU probabilities for one face crop. The plugin must report all
/// twelve units with values in [0, 1].
pub fn run_au_inference(crop: &ColorImage, plugin: &dyn InferencePlugin) -> Result<BTreeMap<ActionUnit, f64>, PluginError> {
    require_kind(plugin, PluginKind::AuDetect)?;
    let name = plugin.info().name;
    let out = plugin.infer(&PluginInput::Image(crop))?;
    let mut map = BTreeMap::new();
    for au in ActionUnit::ALL {
        let p = *out.scores.get(&au.to_string()).ok_or_else(|| PluginError::Failed {
            name: name.clone(),
            message: format!("no probability for {au}"),
        })?;
        if !(0.0..=1.0).contains(&p) {
            return Err(PluginError::Failed { name, message: format!("{au} probability {p} outside [0, 1]") });
        }
        map.insert(au, p);
    }
    Ok(map)
}
