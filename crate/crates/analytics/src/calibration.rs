//! Expected calibration error over equal-width confidence bins.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CalibrationError {
    #[error("no predictions")]
    Empty,
    #[error("bin count must be positive")]
    NoBins,
    #[error("confidence {0} is outside [0, 1]")]
    Confidence(String),
}

pub const DEFAULT_BINS: usize = 10;

/// Bin `i` covers `[i/bins, (i+1)/bins)`; the last bin also takes 1.0.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).floor() as usize).min(bins - 1)
}

/// `Σ_b (n_b/N)·|acc(b) − conf(b)|` where `acc` is the fraction of positive
/// outcomes and `conf` the mean confidence in bin `b`.
pub fn expected_calibration_error(preds: &[(f64, bool)], bins: usize) -> Result<f64, CalibrationError> {
    if bins == 0 {
        return Err(CalibrationError::NoBins);
    }
    if preds.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut n = vec![0usize; bins];
    for &(c, outcome) in preds {
        if !(0.0..=1.0).contains(&c) {
            return Err(CalibrationError::Confidence(c.to_string()));
        }
        let b = bin_index(c, bins);
        conf_sum[b] += c;
        hits[b] += outcome as usize;
        n[b] += 1;
    }
    let total = preds.len() as f64;
    let ece = (0..bins)
        .filter(|&b| n[b] > 0)
        .map(|b| {
            let nb = n[b] as f64;
            (nb / total) * (hits[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum::<f64>();
    Ok(ece.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let p = [(0.9, true), (0.9, false), (0.6, true), (0.6, false)];
        assert!((expected_calibration_error(&p, 10).unwrap() - 0.25).abs() < 1e-9);
    }

    #[test]
    fn edges() {
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 1);
        assert_eq!(expected_calibration_error(&[(1.0, true); 5], 10).unwrap(), 0.0);
        assert_eq!(expected_calibration_error(&[], 10), Err(CalibrationError::Empty));
        assert!(expected_calibration_error(&[(1.5, true)], 10).is_err());
    }
}
