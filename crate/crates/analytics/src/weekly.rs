//! Weekly annotation activity and agreement.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use icu_core::{TimestampMs, MS_PER_DAY, MS_PER_HOUR};
use serde::{Deserialize, Serialize};

use crate::kappa::{fleiss_kappa, KappaReport};
use crate::model::{AuAnnotation, AuLabel};
use crate::quality::effective_annotations;

pub const MS_PER_WEEK: i64 = 7 * MS_PER_DAY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorWeek {
    pub count: usize,
    pub active_hours: f64,
    pub median_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeeklySummary {
    pub week_start: TimestampMs,
    pub annotators: BTreeMap<String, AnnotatorWeek>,
    /// Fleiss κ per label over items with at least two annotators this week.
    /// `None` when no items qualify.
    pub kappa: BTreeMap<String, Option<KappaReport>>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Summary of annotations submitted in `[week_start, week_start + 7 days)`.
/// Skipped items are excluded. Every annotator seen anywhere in `store` is
/// listed, with a zero count if idle this week.
///
/// For κ each label is a binary presence category. Fleiss needs a fixed
/// rater count, so the most common count among qualifying items is used
/// (ties go to the larger) and the other items are reported as excluded.
pub fn weekly_summary(store: &[AuAnnotation], week_start: TimestampMs) -> WeeklySummary {
    let week_end = week_start + MS_PER_WEEK;
    let in_week: Vec<AuAnnotation> = store
        .iter()
        .filter(|a| !a.skipped && a.submitted_ts >= week_start && a.submitted_ts < week_end)
        .cloned()
        .collect();

    let everyone: BTreeSet<&str> = store.iter().map(|a| a.annotator_id.as_str()).collect();
    let mut annotators = BTreeMap::new();
    for who in everyone {
        let mut secs: Vec<f64> = in_week
            .iter()
            .filter(|a| a.annotator_id == who)
            .map(|a| a.duration_ms() as f64 / 1000.0)
            .collect();
        let total_ms: i64 = in_week.iter().filter(|a| a.annotator_id == who).map(|a| a.duration_ms()).sum();
        annotators.insert(
            who.to_owned(),
            AnnotatorWeek {
                count: secs.len(),
                active_hours: total_ms as f64 / MS_PER_HOUR as f64,
                median_seconds: median(&mut secs),
            },
        );
    }

    let eff = effective_annotations(&in_week);
    let mut items: BTreeMap<&str, Vec<&AuAnnotation>> = BTreeMap::new();
    for a in &eff {
        items.entry(&a.item_id).or_default().push(a);
    }
    items.retain(|_, v| v.len() >= 2);
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for v in items.values() {
        *freq.entry(v.len()).or_default() += 1;
    }
    let n = freq.iter().max_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0))).map(|(&n, _)| n);

    let mut kappa = BTreeMap::new();
    for label in AuLabel::ALL {
        let report = n.and_then(|n| {
            let rows: Vec<Vec<u32>> = items
                .values()
                .map(|v| {
                    let yes = v.iter().filter(|a| a.has(label)).count() as u32;
                    vec![v.len() as u32 - yes, yes]
                })
                .collect();
            fleiss_kappa(&rows, n as u32).ok()
        });
        kappa.insert(label.to_string(), report);
    }
    WeeklySummary {
        week_start,
        annotators,
        kappa,
    }
}

impl WeeklySummary {
    /// Plain-text table for operators.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>6} {:>10} {:>10}", "annotator", "count", "hours", "median_s");
        for (who, a) in &self.annotators {
            let med = a.median_seconds.map_or("-".to_string(), |m| format!("{m:.1}"));
            let _ = writeln!(s, "{:<20} {:>6} {:>10.4} {:>10}", who, a.count, a.active_hours, med);
        }
        let _ = writeln!(s, "\n{:<20} {:>8} {:>6}", "label", "kappa", "items");
        for (label, r) in &self.kappa {
            let (k, items) = match r {
                Some(r) => (r.kappa.value().map_or("degen".into(), |v| format!("{v:.3}")), r.items.to_string()),
                None => ("-".into(), "0".into()),
            };
            let _ = writeln!(s, "{:<20} {:>8} {:>6}", label, k, items);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use icu_core::ActionUnit;

    fn ann(who: &str, item: &str, start: i64, secs: i64, labels: &[AuLabel]) -> AuAnnotation {
        AuAnnotation {
            annotator_id: who.into(),
            item_id: item.into(),
            labels: labels.to_vec(),
            started_ts: start,
            submitted_ts: start + secs * 1000,
            comment: None,
            skipped: false,
        }
    }

    #[test]
    fn activity_hand_case() {
        let store = vec![
            ann("a", "1", 0, 10, &[]),
            ann("a", "2", 100_000, 20, &[]),
            ann("a", "3", 200_000, 40, &[]),
            ann("idle", "9", MS_PER_WEEK * 3, 5, &[]),
        ];
        let s = weekly_summary(&store, 0);
        let a = &s.annotators["a"];
        assert_eq!(a.count, 3);
        assert_eq!(a.median_seconds, Some(20.0));
        assert!((a.active_hours - 70.0 / 3600.0).abs() < 1e-12);
        assert!((a.active_hours - 0.0194).abs() < 1e-4);
        let idle = &s.annotators["idle"];
        assert_eq!((idle.count, idle.median_seconds), (0, None));
        assert!(s.kappa.values().all(Option::is_none));
    }

    #[test]
    fn kappa_matches_direct_computation() {
        let au4 = AuLabel::Au(ActionUnit::Au4);
        // item x: two of three mark AU4; item y: nobody does
        let store = vec![
            ann("a", "x", 0, 1, &[au4]),
            ann("b", "x", 0, 1, &[au4]),
            ann("c", "x", 0, 1, &[]),
            ann("a", "y", 0, 1, &[]),
            ann("b", "y", 0, 1, &[]),
            ann("c", "y", 0, 1, &[]),
        ];
        let s = weekly_summary(&store, 0);
        let direct = fleiss_kappa(&[vec![1, 2], vec![3, 0]], 3).unwrap();
        assert_eq!(s.kappa["AU4"].as_ref().unwrap(), &direct);
        assert!((direct.kappa.value().unwrap() - 0.25).abs() < 1e-9);
    }
}
