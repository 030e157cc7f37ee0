//! Detector interface, the two pixel-rule mock detectors, and the
//! per-frame filters built on them.

use std::collections::HashMap;

use icu_core::image::luma;
use icu_core::ColorImage;
use serde::{Deserialize, Serialize};
use tracing::warn;

/// Axis-aligned box in whole pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub bbox: PixelBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("detector failed: {0}")]
pub struct DetectError(pub String);

/// A pure image → detections function. Real model adapters implement this
/// too; the pipelines never look past it.
pub trait Detector {
    fn detect(&self, img: &ColorImage) -> Result<Vec<Detection>, DetectError>;
}

impl<F: Fn(&ColorImage) -> Result<Vec<Detection>, DetectError>> Detector for F {
    fn detect(&self, img: &ColorImage) -> Result<Vec<Detection>, DetectError> {
        self(img)
    }
}

/// 4-connected components of `mask` with at least `min_area` pixels, in
/// order of their first pixel in row-major scan. Returns (bbox, area).
pub fn blobs(mask: &[bool], width: usize, height: usize, min_area: usize) -> Vec<(PixelBox, usize)> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1, mut area) = (usize::MAX, usize::MAX, 0, 0, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % width, i / width);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        if area >= min_area {
            let bbox = PixelBox { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 };
            out.push((bbox, area));
        }
    }
    out
}

fn detections(label: &str, found: Vec<(PixelBox, usize)>) -> Vec<Detection> {
    found
        .into_iter()
        .map(|(bbox, area)| Detection {
            label: label.to_owned(),
            bbox,
            // fraction of the box the blob fills
            confidence: area as f64 / bbox.area() as f64,
        })
        .collect()
}

/// Faces are bright blobs: connected pixels with luma ≥ `min_luma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobFaceDetector {
    pub min_luma: u8,
    pub min_area: usize,
}

impl Default for BlobFaceDetector {
    fn default() -> Self {
        Self { min_luma: 180, min_area: 20 }
    }
}

impl Detector for BlobFaceDetector {
    fn detect(&self, img: &ColorImage) -> Result<Vec<Detection>, DetectError> {
        let mask: Vec<bool> = img.pixels().chunks_exact(3).map(|p| luma(p[0], p[1], p[2]) >= self.min_luma).collect();
        Ok(detections("face", blobs(&mask, img.width(), img.height(), self.min_area)))
    }
}

/// Persons in a depth colormap: connected regions whose color differs from
/// the frame's most common color (the far wall). Isolated speckle is below
/// `min_area`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteDetector {
    pub min_area: usize,
}

impl Default for SilhouetteDetector {
    fn default() -> Self {
        Self { min_area: 24 }
    }
}

impl Detector for SilhouetteDetector {
    fn detect(&self, img: &ColorImage) -> Result<Vec<Detection>, DetectError> {
        let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
        for p in img.pixels().chunks_exact(3) {
            *counts.entry([p[0], p[1], p[2]]).or_default() += 1;
        }
        // ties go to the smallest color so the choice is stable
        let background = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(c, _)| *c)
            .expect("images are non-empty");
        let mask: Vec<bool> = img.pixels().chunks_exact(3).map(|p| p != background).collect();
        Ok(detections("person", blobs(&mask, img.width(), img.height(), self.min_area)))
    }
}

/// Per-filter counters. `failures` are frames the detector errored on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub kept: usize,
    pub no_detection: usize,
    pub multiple: usize,
    pub failures: usize,
}

/// One retained face: input index, the detection box and the crop.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceCrop {
    pub index: usize,
    pub bbox: PixelBox,
    pub crop: ColorImage,
}

/// Keeps frames with exactly one face and crops it. Detector failures and
/// out-of-bounds boxes skip the frame.
pub fn filter_single_face(frames: &[ColorImage], detector: &dyn Detector) -> (Vec<FaceCrop>, FilterStats) {
    let mut stats = FilterStats { input: frames.len(), ..Default::default() };
    let mut out = Vec::new();
    for (index, f) in frames.iter().enumerate() {
        let faces = match detector.detect(f) {
            Ok(d) => d,
            Err(e) => {
                warn!(frame = index, error = %e, "face detector failed; skipping frame");
                stats.failures += 1;
                continue;
            }
        };
        match faces.as_slice() {
            [] => stats.no_detection += 1,
            [one] => match f.crop(one.bbox.x, one.bbox.y, one.bbox.w, one.bbox.h) {
                Ok(crop) => {
                    stats.kept += 1;
                    out.push(FaceCrop { index, bbox: one.bbox, crop });
                }
                Err(e) => {
                    warn!(frame = index, error = %e, "detection outside the frame; skipping");
                    stats.failures += 1;
                }
            },
            _ => stats.multiple += 1,
        }
    }
    (out, stats)
}

/// Indices of the colormaps with at least one person.
pub fn filter_person_frames(colormaps: &[ColorImage], detector: &dyn Detector) -> (Vec<usize>, FilterStats) {
    let mut stats = FilterStats { input: colormaps.len(), ..Default::default() };
    let mut out = Vec::new();
    for (i, f) in colormaps.iter().enumerate() {
        match detector.detect(f) {
            Ok(d) if d.is_empty() => stats.no_detection += 1,
            Ok(_) => {
                stats.kept += 1;
                out.push(i);
            }
            Err(e) => {
                warn!(frame = i, error = %e, "person detector failed; skipping frame");
                stats.failures += 1;
            }
        }
    }
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_four_connected() {
        #[rustfmt::skip]
        let m = [
            true,  false, true,
            false, false, true,
            true,  true,  false,
        ];
        let b = blobs(&m, 3, 3, 1);
        assert_eq!(b.len(), 3);
        assert_eq!(b[1], (PixelBox { x: 2, y: 0, w: 1, h: 2 }, 2));
        assert_eq!(blobs(&m, 3, 3, 2).len(), 2);
    }

    #[test]
    fn failing_detector_is_counted() {
        let f = ColorImage::new(1, 1, vec![0, 0, 0]).unwrap();
        let bad = |_: &ColorImage| -> Result<Vec<Detection>, DetectError> { Err(DetectError("boom".into())) };
        let (kept, stats) = filter_single_face(&[f.clone(), f], &bad);
        assert!(kept.is_empty());
        assert_eq!(stats.failures, 2);
    }
}
