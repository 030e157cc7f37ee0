//! Ensemble weighting and active-learning priorities for face items.

use std::collections::BTreeMap;

use crate::model::{ActiveLearningScore, AuLabel};
use crate::quality::ItemConsensus;

pub const DEFAULT_BETA: f64 = 0.5;

/// `(1 − ECE_m) / Σ(1 − ECE_k)`; uniform when every model has ECE 1.
pub fn ensemble_weights(eces: &[f64]) -> Vec<f64> {
    if eces.is_empty() {
        return Vec::new();
    }
    let raw: Vec<f64> = eces.iter().map(|e| (1.0 - e).clamp(0.0, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / eces.len() as f64; eces.len()];
    }
    raw.iter().map(|r| r / total).collect()
}

/// Weighted ensemble probability for `class`, renormalized over the models
/// that cover it. `None` when no model does.
pub fn ensemble_prob(class: AuLabel, preds: &[&BTreeMap<AuLabel, f64>], weights: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (p, &w) in preds.iter().zip(weights) {
        if let Some(&v) = p.get(&class) {
            num += w * v;
            den += w;
        }
    }
    if den > 0.0 {
        Some((num / den).clamp(0.0, 1.0))
    } else {
        // every covering model has weight zero: fall back to a plain mean
        let vals: Vec<f64> = preds.iter().filter_map(|p| p.get(&class).copied()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Priority of one labeled class: `1 − (β·quality + (1−β)·c)`.
pub fn labeled_class_priority(quality: f64, c: f64, beta: f64) -> f64 {
    (1.0 - (beta * quality + (1.0 - beta) * c)).clamp(0.0, 1.0)
}

/// Priority of one unlabeled class: `1 − |2p̄ − 1|`.
pub fn unlabeled_class_priority(p_bar: f64) -> f64 {
    (1.0 - (2.0 * p_bar - 1.0).abs()).clamp(0.0, 1.0)
}

/// Per class, `c` is the ensemble confidence in the consensus label. Classes
/// no model covers use `c = quality`.
pub fn al_score_labeled(consensus: &ItemConsensus, preds: &[&BTreeMap<AuLabel, f64>], weights: &[f64], beta: f64) -> ActiveLearningScore {
    let per_class = consensus
        .classes
        .iter()
        .map(|(&class, cc)| {
            let c = match ensemble_prob(class, preds, weights) {
                Some(p) if cc.label => p,
                Some(p) => 1.0 - p,
                None => cc.quality,
            };
            (class.to_string(), labeled_class_priority(cc.quality, c, beta))
        })
        .collect();
    ActiveLearningScore::from_parts(&consensus.item_id, per_class)
}

/// Classes no model covers are maximally uncertain (priority 1).
pub fn al_score_unlabeled(item_id: &str, preds: &[&BTreeMap<AuLabel, f64>], weights: &[f64], classes: &[AuLabel]) -> ActiveLearningScore {
    let per_class = classes
        .iter()
        .map(|&class| {
            let pr = ensemble_prob(class, preds, weights).map_or(1.0, unlabeled_class_priority);
            (class.to_string(), pr)
        })
        .collect();
    ActiveLearningScore::from_parts(item_id, per_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::ClassConsensus;
    use icu_core::ActionUnit;

    const AU6: AuLabel = AuLabel::Au(ActionUnit::Au6);

    #[test]
    fn weights_hand_cases() {
        let w = ensemble_weights(&[0.1, 0.3]);
        assert!((w[0] - 0.5625).abs() < 1e-12 && (w[1] - 0.4375).abs() < 1e-12);
        assert_eq!(ensemble_weights(&[0.4]), vec![1.0]);
        assert_eq!(ensemble_weights(&[1.0, 1.0]), vec![0.5, 0.5]);
        assert_eq!(ensemble_weights(&[0.2, 0.2, 0.2]), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn labeled_priority_hand_case() {
        assert!((labeled_class_priority(0.8, 0.6, 0.5) - 0.3).abs() < 1e-12);
        assert_eq!(labeled_class_priority(1.0, 1.0, 0.5), 0.0);
        let cons = ItemConsensus {
            item_id: "x".into(),
            classes: BTreeMap::from([(
                AU6,
                ClassConsensus {
                    label: true,
                    quality: 0.8,
                    v0: 0.2,
                    v1: 0.8,
                },
            )]),
        };
        let m1 = BTreeMap::from([(AU6, 0.7)]);
        let m2 = BTreeMap::from([(AU6, 0.5)]);
        let s = al_score_labeled(&cons, &[&m1, &m2], &[0.5, 0.5], 0.5);
        assert!((s.priority - 0.3).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_priority_cases() {
        let a = BTreeMap::from([(AU6, 0.9)]);
        let b = BTreeMap::from([(AU6, 0.1)]);
        let s = al_score_unlabeled("x", &[&a, &b], &[0.5, 0.5], &[AU6]);
        assert!((s.priority - 1.0).abs() < 1e-12);
        assert_eq!(unlabeled_class_priority(0.0), 0.0);
        assert_eq!(unlabeled_class_priority(1.0), 0.0);
        let none = al_score_unlabeled("x", &[], &[], &[AU6]);
        assert_eq!(none.priority, 1.0);
    }
}
