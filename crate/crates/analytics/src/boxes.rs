//! Box matching across annotators and per-cluster agreement.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{BBox, BoxAnnotation, BoxLabel};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union. Two empty boxes count as identical when equal.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub annotator_id: String,
    pub box_index: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCluster {
    pub label: BoxLabel,
    /// Weighted mean of the member boxes.
    pub representative: BBox,
    pub members: Vec<ClusterMember>,
    pub agreement: f64,
    pub priority: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxClustering {
    pub item_id: String,
    pub clusters: Vec<BoxCluster>,
    /// Mean cluster priority; 0 when nobody drew a box.
    pub priority: f64,
}

fn weighted_mean(members: &[(f64, BBox)]) -> BBox {
    let total: f64 = members.iter().map(|m| m.0).sum();
    let (ws, norm): (Vec<f64>, f64) = if total > 0.0 {
        (members.iter().map(|m| m.0).collect(), total)
    } else {
        (vec![1.0; members.len()], members.len() as f64)
    };
    let mut acc = [0.0; 4];
    for (w, (_, b)) in ws.iter().zip(members) {
        acc[0] += w * b.x;
        acc[1] += w * b.y;
        acc[2] += w * b.w;
        acc[3] += w * b.h;
    }
    BBox::new(acc[0] / norm, acc[1] / norm, acc[2] / norm, acc[3] / norm)
}

/// Greedy clustering of the boxes all annotators drew on one item.
///
/// Boxes are visited by annotator weight descending, then annotator id, then
/// geometry and label, so neither annotation order nor the order of boxes
/// within an annotation changes the result. A box joins the first same-label cluster whose representative
/// overlaps it with IoU ≥ `iou_thr` and that has no box from the same
/// annotator yet; otherwise it founds a new cluster. Agreement is the weight
/// of contributing annotators over the weight of everyone who annotated the
/// item. Annotators missing from `weights` count as 1.0, and when all weights
/// are zero every annotator counts equally.
pub fn cluster_boxes(item_id: &str, annotations: &[BoxAnnotation], weights: &BTreeMap<String, f64>, iou_thr: f64) -> BoxClustering {
    let mut latest: BTreeMap<&str, &BoxAnnotation> = BTreeMap::new();
    for a in annotations.iter().filter(|a| !a.skipped && a.item_id == item_id) {
        let slot = latest.entry(&a.annotator_id).or_insert(a);
        if a.submitted_ts >= slot.submitted_ts {
            *slot = a;
        }
    }
    let mut w: BTreeMap<&str, f64> = latest
        .keys()
        .map(|&k| (k, weights.get(k).copied().unwrap_or(1.0).max(0.0)))
        .collect();
    if w.values().all(|&v| v == 0.0) {
        w.values_mut().for_each(|v| *v = 1.0);
    }
    let total_weight: f64 = w.values().sum();

    let mut entries: Vec<(f64, &str, usize, BBox, BoxLabel)> = latest
        .iter()
        .flat_map(|(&who, a)| a.boxes.iter().enumerate().map(move |(i, b)| (who, i, b)))
        .map(|(who, i, b)| (w[who], who, i, b.bbox, b.label))
        .collect();
    entries.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.cmp(b.1))
            .then_with(|| a.3.x.total_cmp(&b.3.x))
            .then_with(|| a.3.y.total_cmp(&b.3.y))
            .then_with(|| a.3.w.total_cmp(&b.3.w))
            .then_with(|| a.3.h.total_cmp(&b.3.h))
            .then_with(|| a.4.cmp(&b.4))
            .then_with(|| a.2.cmp(&b.2))
    });

    struct Building<'a> {
        label: BoxLabel,
        members: Vec<(&'a str, usize, f64, BBox)>,
        rep: BBox,
    }
    let mut clusters: Vec<Building> = Vec::new();
    for (weight, who, idx, bbox, label) in entries {
        let target = clusters.iter_mut().find(|c| {
            c.label == label && c.members.iter().all(|m| m.0 != who) && iou(&c.rep, &bbox) >= iou_thr
        });
        match target {
            Some(c) => {
                c.members.push((who, idx, weight, bbox));
                let wb: Vec<(f64, BBox)> = c.members.iter().map(|m| (m.2, m.3)).collect();
                c.rep = weighted_mean(&wb);
            }
            None => clusters.push(Building {
                label,
                members: vec![(who, idx, weight, bbox)],
                rep: bbox,
            }),
        }
    }

    let clusters: Vec<BoxCluster> = clusters
        .into_iter()
        .map(|c| {
            let contrib: f64 = c.members.iter().map(|m| m.2).sum();
            let agreement = if total_weight > 0.0 { (contrib / total_weight).clamp(0.0, 1.0) } else { 0.0 };
            BoxCluster {
                label: c.label,
                representative: c.rep,
                members: c
                    .members
                    .iter()
                    .map(|m| ClusterMember {
                        annotator_id: m.0.to_owned(),
                        box_index: m.1,
                        bbox: m.3,
                    })
                    .collect(),
                agreement,
                priority: 1.0 - agreement,
            }
        })
        .collect();
    let priority = if clusters.is_empty() {
        0.0
    } else {
        clusters.iter().map(|c| c.priority).sum::<f64>() / clusters.len() as f64
    };
    BoxClustering {
        item_id: item_id.to_owned(),
        clusters,
        priority,
    }
}

/// Ordering used to sort scores: priority descending, then id.
pub fn priority_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LabeledBox;

    fn ann(who: &str, boxes: &[(f64, f64, f64, f64, BoxLabel)]) -> BoxAnnotation {
        BoxAnnotation {
            annotator_id: who.into(),
            item_id: "it".into(),
            boxes: boxes
                .iter()
                .map(|&(x, y, w, h, label)| LabeledBox {
                    bbox: BBox::new(x, y, w, h),
                    label,
                })
                .collect(),
            started_ts: 0,
            submitted_ts: 1,
            comment: None,
            skipped: false,
        }
    }

    #[test]
    fn iou_hand_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 5.0, 10.0, 10.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-9);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 5.0, 5.0)), 0.0);
        // touching edges do not overlap
        assert_eq!(iou(&a, &BBox::new(10.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn unanimous_boxes_form_one_cluster() {
        let s = BoxLabel::Sitting;
        let anns = vec![ann("a", &[(1.0, 1.0, 10.0, 20.0, s)]), ann("b", &[(1.0, 1.0, 10.0, 20.0, s)]), ann("c", &[(1.0, 1.0, 10.0, 20.0, s)])];
        let r = cluster_boxes("it", &anns, &BTreeMap::new(), 0.5);
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.clusters[0].agreement, 1.0);
        assert_eq!(r.priority, 0.0);
    }

    #[test]
    fn disjoint_equal_weight_boxes() {
        let s = BoxLabel::Standing;
        let anns = vec![ann("a", &[(0.0, 0.0, 10.0, 10.0, s)]), ann("b", &[(50.0, 50.0, 10.0, 10.0, s)])];
        let r = cluster_boxes("it", &anns, &BTreeMap::new(), 0.5);
        assert_eq!(r.clusters.len(), 2);
        assert!(r.clusters.iter().all(|c| c.agreement == 0.5));
        assert_eq!(r.priority, 0.5);
    }

    #[test]
    fn label_and_annotator_separate_clusters() {
        let anns = vec![
            ann("a", &[(0.0, 0.0, 10.0, 10.0, BoxLabel::Sitting), (0.0, 0.0, 10.0, 10.0, BoxLabel::Sitting)]),
            ann("b", &[(0.0, 0.0, 10.0, 10.0, BoxLabel::Standing)]),
        ];
        let r = cluster_boxes("it", &anns, &BTreeMap::new(), 0.5);
        // a's two boxes cannot share a cluster; b's box has another label
        assert_eq!(r.clusters.len(), 3);
    }

    #[test]
    fn representative_is_weighted_mean() {
        let s = BoxLabel::Sitting;
        let anns = vec![ann("a", &[(0.0, 0.0, 10.0, 10.0, s)]), ann("b", &[(1.0, 0.0, 10.0, 10.0, s)])];
        let w = BTreeMap::from([("a".to_string(), 0.75), ("b".to_string(), 0.25)]);
        let r = cluster_boxes("it", &anns, &w, 0.5);
        assert_eq!(r.clusters.len(), 1);
        assert!((r.clusters[0].representative.x - 0.25).abs() < 1e-12);
    }
}
