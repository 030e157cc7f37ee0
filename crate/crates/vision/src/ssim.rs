//! Whole-frame structural similarity and near-duplicate removal.

use icu_core::GrayImage;

pub const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("image sizes differ: {a:?} vs {b:?}")]
pub struct SsimError {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

fn mean(px: &[u8]) -> f64 {
    px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64
}

/// SSIM from global statistics, with population (co)variances over all pixels.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64, SsimError> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(SsimError {
            a: (a.width(), a.height()),
            b: (b.width(), b.height()),
        });
    }
    let (pa, pb) = (a.pixels(), b.pixels());
    let n = pa.len() as f64;
    let (ma, mb) = (mean(pa), mean(pb));
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in pa.iter().zip(pb) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    Ok(((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2)))
}

/// Indices of the frames kept when each frame is compared with the last
/// kept one. Frames of a different size from the last kept frame are
/// always kept.
pub fn dedup_successive(frames: &[GrayImage], threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let keep = match kept.last() {
            None => true,
            Some(&j) => ssim(&frames[j], f).map_or(true, |s| s < threshold),
        };
        if keep {
            kept.push(i);
        }
    }
    kept
}
