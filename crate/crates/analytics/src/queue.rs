//! Ranked active-learning queues built from a store snapshot.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::active::{al_score_labeled, al_score_unlabeled, ensemble_prob, ensemble_weights, unlabeled_class_priority};
use crate::boxes::{cluster_boxes, priority_order, DEFAULT_IOU_THRESHOLD};
use crate::calibration::{expected_calibration_error, DEFAULT_BINS};
use crate::model::{AuAnnotation, AuLabel, AuPrediction, BoxAnnotation, BoxPrediction};
use crate::quality::{annotator_quality, consensus, effective_annotations, ItemProbs, DEFAULT_ALPHA, DEFAULT_MODEL_WEIGHT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlConfig {
    pub alpha: f64,
    pub beta: f64,
    pub model_weight: f64,
    pub iou_threshold: f64,
    pub bins: usize,
}

impl Default for AlConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: crate::active::DEFAULT_BETA,
            model_weight: DEFAULT_MODEL_WEIGHT,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            bins: DEFAULT_BINS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub item_id: String,
    pub priority: f64,
    pub labeled: bool,
    pub per_class: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceQueue {
    pub annotator_weights: BTreeMap<String, f64>,
    pub model_weights: BTreeMap<String, f64>,
    pub model_ece: BTreeMap<String, f64>,
    pub entries: Vec<QueueEntry>,
}

fn sort_entries(entries: &mut [QueueEntry]) {
    entries.sort_by(|a, b| priority_order((a.priority, &a.item_id), (b.priority, &b.item_id)));
}

/// Face queue over every annotated or predicted item.
///
/// 1. Uniform ensemble → mean probabilities → annotator weights.
/// 2. Consensus per labeled item with the model as a virtual annotator.
/// 3. Each model's ECE against the consensus labels → ensemble weights.
/// 4. Labeled items are scored from consensus quality and ensemble
///    confidence, the rest from ensemble uncertainty.
pub fn face_queue(annotations: &[AuAnnotation], predictions: &[AuPrediction], cfg: &AlConfig) -> FaceQueue {
    let classes = &AuLabel::ALL[..];
    let models: Vec<&str> = predictions.iter().map(|p| p.model_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    // item -> model index -> probs (the last line for a pair wins)
    let mut by_item: BTreeMap<&str, BTreeMap<usize, &BTreeMap<AuLabel, f64>>> = BTreeMap::new();
    for p in predictions {
        let m = models.binary_search(&p.model_id.as_str()).expect("model listed");
        by_item.entry(&p.item_id).or_default().insert(m, &p.probs);
    }
    let preds_for = |item: &str| -> (Vec<&BTreeMap<AuLabel, f64>>, Vec<usize>) {
        by_item
            .get(item)
            .map(|m| (m.values().copied().collect(), m.keys().copied().collect()))
            .unwrap_or_default()
    };
    let mean_probs = |weights: &[f64]| -> ItemProbs {
        by_item
            .keys()
            .map(|&item| {
                let (preds, idx) = preds_for(item);
                let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
                let probs = classes.iter().filter_map(|&c| ensemble_prob(c, &preds, &w).map(|p| (c, p))).collect();
                (item.to_owned(), probs)
            })
            .collect()
    };

    let uniform = vec![1.0; models.len()];
    let p_bar = mean_probs(&uniform);
    let mut annotator_weights: BTreeMap<String, f64> = annotator_quality(annotations, &p_bar, cfg.alpha, classes)
        .into_iter()
        .map(|q| (q.annotator_id, q.weight))
        .collect();
    if annotator_weights.values().all(|&w| w == 0.0) {
        annotator_weights.values_mut().for_each(|w| *w = 1.0);
    }

    let eff = effective_annotations(annotations);
    let mut labeled: BTreeMap<&str, Vec<&AuAnnotation>> = BTreeMap::new();
    for a in eff {
        labeled.entry(&a.item_id).or_default().push(a);
    }
    let mut consensuses = BTreeMap::new();
    for (&item, anns) in &labeled {
        match consensus(item, anns, &annotator_weights, p_bar.get(item), cfg.model_weight, classes) {
            Ok(c) => {
                consensuses.insert(item, c);
            }
            Err(e) => warn!(item, error = %e, "no consensus; scoring as unlabeled"),
        }
    }

    let mut model_ece = BTreeMap::new();
    let eces: Vec<f64> = models
        .iter()
        .enumerate()
        .map(|(mi, &model)| {
            let pairs: Vec<(f64, bool)> = consensuses
                .iter()
                .filter_map(|(item, c)| by_item.get(item).and_then(|m| m.get(&mi)).map(|probs| (c, probs)))
                .flat_map(|(c, probs)| c.classes.iter().filter_map(|(cl, cc)| probs.get(cl).map(|&p| (p, cc.label))))
                .collect();
            let ece = expected_calibration_error(&pairs, cfg.bins).unwrap_or(0.0);
            model_ece.insert(model.to_owned(), ece);
            ece
        })
        .collect();
    let weights = ensemble_weights(&eces);
    let model_weights = models.iter().zip(&weights).map(|(m, &w)| (m.to_string(), w)).collect();

    let items: BTreeSet<&str> = labeled.keys().chain(by_item.keys()).copied().collect();
    let mut entries: Vec<QueueEntry> = items
        .into_iter()
        .map(|item| {
            let (preds, idx) = preds_for(item);
            let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
            let (score, is_labeled) = match consensuses.get(item) {
                Some(c) => (al_score_labeled(c, &preds, &w, cfg.beta), true),
                None => (al_score_unlabeled(item, &preds, &w, classes), false),
            };
            QueueEntry {
                item_id: item.to_owned(),
                priority: score.priority,
                labeled: is_labeled,
                per_class: score.per_class,
            }
        })
        .collect();
    sort_entries(&mut entries);
    FaceQueue {
        annotator_weights,
        model_weights,
        model_ece,
        entries,
    }
}

/// Depth queue. Annotated items are scored by box-cluster disagreement,
/// unannotated ones by the mean uncertainty of their proposals (1.0 with
/// none). Annotators are weighted by `weights`, defaulting to 1.0.
pub fn depth_queue(annotations: &[BoxAnnotation], predictions: &[BoxPrediction], weights: &BTreeMap<String, f64>, cfg: &AlConfig) -> Vec<QueueEntry> {
    let annotated: BTreeSet<&str> = annotations.iter().filter(|a| !a.skipped).map(|a| a.item_id.as_str()).collect();
    let mut proposals: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for p in predictions {
        proposals.entry(&p.item_id).or_default().extend(p.proposals.iter().map(|b| b.confidence));
    }
    let items: BTreeSet<&str> = annotated.iter().chain(proposals.keys()).copied().collect();
    let mut entries: Vec<QueueEntry> = items
        .into_iter()
        .map(|item| {
            if annotated.contains(item) {
                let c = cluster_boxes(item, annotations, weights, cfg.iou_threshold);
                let per_class = c
                    .clusters
                    .iter()
                    .enumerate()
                    .map(|(i, cl)| (format!("cluster{i}"), cl.priority))
                    .collect();
                QueueEntry {
                    item_id: item.to_owned(),
                    priority: c.priority,
                    labeled: true,
                    per_class,
                }
            } else {
                let confs = &proposals[item];
                let per_class: BTreeMap<String, f64> = confs
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| (format!("proposal{i}"), unlabeled_class_priority(c)))
                    .collect();
                let priority = if per_class.is_empty() {
                    1.0
                } else {
                    per_class.values().sum::<f64>() / per_class.len() as f64
                };
                QueueEntry {
                    item_id: item.to_owned(),
                    priority,
                    labeled: false,
                    per_class,
                }
            }
        })
        .collect();
    sort_entries(&mut entries);
    entries
}
