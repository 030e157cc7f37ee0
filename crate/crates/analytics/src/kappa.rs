//! Fleiss' kappa for a fixed number of raters per item.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KappaError {
    #[error("need at least 2 raters per item, got {0}")]
    TooFewRaters(u32),
    #[error("no item has exactly {0} ratings")]
    NoItems(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Kappa {
    Value(f64),
    /// Expected agreement is 1: every rating fell in a single category, so
    /// chance-corrected agreement is undefined.
    Degenerate,
}

impl Kappa {
    pub fn value(self) -> Option<f64> {
        match self {
            Kappa::Value(v) => Some(v),
            Kappa::Degenerate => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub kappa: Kappa,
    pub raters: u32,
    pub items: usize,
    /// Indices of rows whose rating count differed from `raters`.
    pub excluded: Vec<usize>,
    pub p_bar: f64,
    pub p_e: f64,
}

/// `counts[i][j]` is how many of the `n` raters put item `i` in category `j`.
pub fn fleiss_kappa(counts: &[Vec<u32>], n: u32) -> Result<KappaReport, KappaError> {
    if n < 2 {
        return Err(KappaError::TooFewRaters(n));
    }
    let k = counts.iter().map(Vec::len).max().unwrap_or(0);
    let mut excluded = Vec::new();
    let mut totals = vec![0u64; k];
    let mut p_sum = 0.0;
    let mut used = 0usize;
    let nf = n as f64;
    for (i, row) in counts.iter().enumerate() {
        if row.iter().map(|&c| c as u64).sum::<u64>() != n as u64 {
            excluded.push(i);
            continue;
        }
        let sq: u64 = row.iter().map(|&c| (c as u64) * (c as u64)).sum();
        p_sum += (sq as f64 - nf) / (nf * (nf - 1.0));
        for (j, &c) in row.iter().enumerate() {
            totals[j] += c as u64;
        }
        used += 1;
    }
    if used == 0 {
        return Err(KappaError::NoItems(n));
    }
    let denom = used as f64 * nf;
    let p_bar = p_sum / used as f64;
    let p_e: f64 = totals.iter().map(|&t| (t as f64 / denom).powi(2)).sum();
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        Kappa::Degenerate
    } else {
        Kappa::Value((p_bar - p_e) / (1.0 - p_e))
    };
    Ok(KappaReport {
        kappa,
        raters: n,
        items: used,
        excluded,
        p_bar,
        p_e,
    })
}

/// Builds the count matrix from per-item category assignments.
pub fn counts_from_ratings(ratings: &[Vec<usize>], categories: usize) -> Vec<Vec<u32>> {
    ratings
        .iter()
        .map(|r| {
            let mut row = vec![0u32; categories];
            for &c in r {
                row[c] += 1;
            }
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        // A = 0, B = 1: {[A,A,B], [B,B,B]}
        let r = fleiss_kappa(&counts_from_ratings(&[vec![0, 0, 1], vec![1, 1, 1]], 2), 3).unwrap();
        assert!((r.p_bar - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.p_e - 5.0 / 9.0).abs() < 1e-12);
        assert!((r.kappa.value().unwrap() - 0.25).abs() < 1e-9);
    }

    #[test]
    fn perfect_agreement_and_degenerate() {
        let r = fleiss_kappa(&[vec![3, 0], vec![0, 3]], 3).unwrap();
        assert_eq!(r.kappa, Kappa::Value(1.0));
        let r = fleiss_kappa(&[vec![3, 0], vec![3, 0]], 3).unwrap();
        assert_eq!(r.kappa, Kappa::Degenerate);
    }

    #[test]
    fn mismatched_rows_excluded_and_reported() {
        let r = fleiss_kappa(&[vec![0, 0, 1, 0], vec![2, 1], vec![0, 3]], 3).unwrap();
        assert_eq!(r.excluded, vec![0]);
        assert_eq!(r.items, 2);
        assert!(matches!(fleiss_kappa(&[vec![1]], 1), Err(KappaError::TooFewRaters(1))));
        assert!(matches!(fleiss_kappa(&[vec![1, 1]], 3), Err(KappaError::NoItems(3))));
    }
}
