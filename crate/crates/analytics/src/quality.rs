//! Annotator weights and weighted consensus labels.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{AnnotatorQuality, AuAnnotation, AuLabel};

pub const DEFAULT_ALPHA: f64 = 0.5;
/// Weight of the model when it votes as a virtual annotator.
pub const DEFAULT_MODEL_WEIGHT: f64 = 0.5;

/// Ensemble probability per class, per item.
pub type ItemProbs = BTreeMap<String, BTreeMap<AuLabel, f64>>;

/// Drops skipped annotations and keeps only the latest submission of each
/// annotator per item (ties on `submitted_ts` go to the later entry).
pub fn effective_annotations(annotations: &[AuAnnotation]) -> Vec<&AuAnnotation> {
    let mut latest: BTreeMap<(&str, &str), &AuAnnotation> = BTreeMap::new();
    for a in annotations.iter().filter(|a| !a.skipped) {
        let slot = latest.entry((&a.item_id, &a.annotator_id)).or_insert(a);
        if a.submitted_ts >= slot.submitted_ts {
            *slot = a;
        }
    }
    latest.into_values().collect()
}

fn by_item<'a>(annotations: &[&'a AuAnnotation]) -> BTreeMap<&'a str, Vec<&'a AuAnnotation>> {
    let mut m: BTreeMap<&str, Vec<&AuAnnotation>> = BTreeMap::new();
    for a in annotations {
        m.entry(a.item_id.as_str()).or_default().push(a);
    }
    m
}

/// `weight = α·mean(model confidence in the annotator's labels)
///         + (1−α)·mean(agreement with the majority of the other annotators)`.
///
/// The peer term only counts items with at least two other annotators; an
/// unweighted majority tie counts as "absent". Annotators without any peer
/// overlap get `α·model term` alone, and without model predictions the model
/// term is 0. Results are sorted by annotator id.
pub fn annotator_quality(annotations: &[AuAnnotation], probs: &ItemProbs, alpha: f64, classes: &[AuLabel]) -> Vec<AnnotatorQuality> {
    let eff = effective_annotations(annotations);
    let items = by_item(&eff);
    let annotators: BTreeSet<&str> = eff.iter().map(|a| a.annotator_id.as_str()).collect();
    let mut out = Vec::new();
    for who in annotators {
        let (mut mc_sum, mut mc_n) = (0.0, 0usize);
        let (mut pa_sum, mut pa_n) = (0.0, 0usize);
        for (item, anns) in &items {
            let Some(mine) = anns.iter().find(|a| a.annotator_id == who) else {
                continue;
            };
            let others: Vec<_> = anns.iter().filter(|a| a.annotator_id != who).collect();
            let item_probs = probs.get(*item);
            for &class in classes {
                let label = mine.has(class);
                if let Some(&p) = item_probs.and_then(|m| m.get(&class)) {
                    mc_sum += if label { p } else { 1.0 - p };
                    mc_n += 1;
                }
                if others.len() >= 2 {
                    let yes = others.iter().filter(|a| a.has(class)).count();
                    let majority = yes * 2 > others.len();
                    pa_sum += (majority == label) as u8 as f64;
                    pa_n += 1;
                }
            }
        }
        let mc = if mc_n > 0 { mc_sum / mc_n as f64 } else { 0.0 };
        let weight = if pa_n > 0 {
            alpha * mc + (1.0 - alpha) * (pa_sum / pa_n as f64)
        } else {
            alpha * mc
        };
        out.push(AnnotatorQuality {
            annotator_id: who.to_owned(),
            weight: weight.clamp(0.0, 1.0),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConsensusError {
    #[error("item has no annotations")]
    NoAnnotations,
    #[error("all voting weights are zero")]
    ZeroWeight,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassConsensus {
    /// Consensus presence of the class.
    pub label: bool,
    /// Winning mass over total mass, in [0.5, 1].
    pub quality: f64,
    pub v0: f64,
    pub v1: f64,
}

/// Weighted vote on one binary class. The model, if present, contributes
/// `wm·p` for presence and `wm·(1−p)` for absence. Near-exact ties go to absent.
pub fn vote(votes: &[(f64, bool)], model: Option<(f64, f64)>) -> Result<ClassConsensus, ConsensusError> {
    let (mut v0, mut v1) = (0.0, 0.0);
    for &(w, label) in votes {
        let w = w.max(0.0);
        if label {
            v1 += w;
        } else {
            v0 += w;
        }
    }
    if let Some((wm, p)) = model {
        let wm = wm.max(0.0);
        v1 += wm * p;
        v0 += wm * (1.0 - p);
    }
    let total = v0 + v1;
    if total <= 0.0 {
        return Err(ConsensusError::ZeroWeight);
    }
    let tie = (v1 - v0).abs() <= 1e-12 * total;
    let label = v1 > v0 && !tie;
    let quality = if label { v1 } else { v0 } / total;
    Ok(ClassConsensus { label, quality, v0, v1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemConsensus {
    pub item_id: String,
    pub classes: BTreeMap<AuLabel, ClassConsensus>,
}

impl ItemConsensus {
    /// Per-item quality: mean over classes.
    pub fn quality(&self) -> f64 {
        if self.classes.is_empty() {
            return 0.0;
        }
        self.classes.values().map(|c| c.quality).sum::<f64>() / self.classes.len() as f64
    }
}

/// Consensus for one item. Annotators missing from `weights` vote with
/// weight 0. `model_probs` turns the model into a virtual annotator of
/// weight `wm` for the classes it covers.
pub fn consensus(
    item_id: &str,
    annotations: &[&AuAnnotation],
    weights: &BTreeMap<String, f64>,
    model_probs: Option<&BTreeMap<AuLabel, f64>>,
    wm: f64,
    classes: &[AuLabel],
) -> Result<ItemConsensus, ConsensusError> {
    if annotations.is_empty() {
        return Err(ConsensusError::NoAnnotations);
    }
    let mut out = BTreeMap::new();
    for &class in classes {
        let votes: Vec<(f64, bool)> = annotations
            .iter()
            .map(|a| (weights.get(&a.annotator_id).copied().unwrap_or(0.0), a.has(class)))
            .collect();
        let model = model_probs.and_then(|m| m.get(&class)).map(|&p| (wm, p));
        out.insert(class, vote(&votes, model)?);
    }
    Ok(ItemConsensus {
        item_id: item_id.to_owned(),
        classes: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use icu_core::ActionUnit;

    const AU4: AuLabel = AuLabel::Au(ActionUnit::Au4);

    fn ann(who: &str, item: &str, labels: &[AuLabel]) -> AuAnnotation {
        AuAnnotation {
            annotator_id: who.into(),
            item_id: item.into(),
            labels: labels.to_vec(),
            started_ts: 0,
            submitted_ts: 1,
            comment: None,
            skipped: false,
        }
    }

    #[test]
    fn weighted_vote_hand_case() {
        let c = vote(&[(0.5, true), (0.3, true), (0.2, false)], None).unwrap();
        assert!(c.label);
        assert!((c.quality - 0.8).abs() < 1e-12);
        let u = vote(&[(0.2, false), (0.9, false)], None).unwrap();
        assert_eq!((u.label, u.quality), (false, 1.0));
    }

    #[test]
    fn ties_and_neutral_model() {
        let t = vote(&[(0.5, true), (0.5, false)], None).unwrap();
        assert!(!t.label);
        assert_eq!(t.quality, 0.5);
        let base = vote(&[(0.6, true), (0.4, false)], None).unwrap();
        let with_model = vote(&[(0.6, true), (0.4, false)], Some((0.5, 0.5))).unwrap();
        assert_eq!(base.label, with_model.label);
        assert_eq!(vote(&[(0.0, true)], None), Err(ConsensusError::ZeroWeight));
    }

    #[test]
    fn quality_hand_case() {
        // Annotator "a" labels AU4 on i1 and nothing on i2. The model gives
        // p(AU4) = 0.9 on i1 and 0.3 on i2, so its confidence in a's labels is
        // {0.9, 0.7}. Peers b, c agree on i1 and disagree (both present) on i2.
        let anns = vec![
            ann("a", "i1", &[AU4]),
            ann("b", "i1", &[AU4]),
            ann("c", "i1", &[AU4]),
            ann("a", "i2", &[]),
            ann("b", "i2", &[AU4]),
            ann("c", "i2", &[AU4]),
        ];
        let mut probs = ItemProbs::new();
        probs.insert("i1".into(), BTreeMap::from([(AU4, 0.9)]));
        probs.insert("i2".into(), BTreeMap::from([(AU4, 0.3)]));
        let q = annotator_quality(&anns, &probs, 0.5, &[AU4]);
        let a = q.iter().find(|q| q.annotator_id == "a").unwrap();
        assert!((a.weight - 0.65).abs() < 1e-12);
        let pure = annotator_quality(&anns, &probs, 1.0, &[AU4]);
        assert!((pure[0].weight - 0.8).abs() < 1e-12);
    }

    #[test]
    fn no_peer_overlap_gets_alpha_term() {
        let anns = vec![ann("solo", "i1", &[AU4])];
        let probs = ItemProbs::from([("i1".to_string(), BTreeMap::from([(AU4, 1.0)]))]);
        let q = annotator_quality(&anns, &probs, 0.5, &[AU4]);
        assert_eq!(q[0].weight, 0.5);
    }

    #[test]
    fn latest_submission_wins_and_skips_ignored() {
        let mut first = ann("a", "i", &[AU4]);
        first.submitted_ts = 1;
        let mut second = ann("a", "i", &[]);
        second.submitted_ts = 2;
        let mut skipped = ann("b", "i", &[AU4]);
        skipped.skipped = true;
        let all = [first, second, skipped];
        let eff = effective_annotations(&all);
        assert_eq!(eff.len(), 1);
        assert!(eff[0].labels.is_empty());
    }
}
