//! Feed-driven risk scores.
//!
//! The built-in stub computes
//!
//! ```text
//! score(t) = 1 / (1 + exp(−z)),   z = bias + Σᵢ wᵢ · (xᵢ(t) − refᵢ)
//! ```
//!
//! where `xᵢ(t)` is the latest value of variable `i` at or before `t` and no
//! older than `lookback_ms`. A variable with no such value contributes 0.

use std::collections::BTreeMap;

use icu_core::{ClinicalFeed, TimestampMs};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::engine::{Metric, MetricPoint};
use crate::plugin::{require_kind, InferencePlugin, PluginError, PluginInfo, PluginInput, PluginKind, PluginOutput};

pub const SCORE_KEY: &str = "score";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVariable {
    pub name: String,
    pub weight: f64,
    pub reference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StubScorePlugin {
    pub name: String,
    pub bias: f64,
    pub lookback_ms: i64,
    pub variables: Vec<ScoreVariable>,
}

fn var(name: &str, weight: f64, reference: f64) -> ScoreVariable {
    ScoreVariable { name: name.into(), weight, reference }
}

impl StubScorePlugin {
    /// Acuity stand-in: tachycardia, tachypnoea, fever, hypoxia, hypotension
    /// and a falling GCS all push the score up.
    pub fn acuity() -> Self {
        Self {
            name: "acuity-stub".into(),
            bias: -1.5,
            lookback_ms: 6 * 3_600_000,
            variables: vec![
                var("heart_rate", 0.03, 80.0),
                var("resp_rate", 0.08, 16.0),
                var("temp_c", 0.4, 37.0),
                var("spo2", -0.12, 97.0),
                var("map", -0.02, 85.0),
                var("gcs", -0.35, 15.0),
            ],
        }
    }

    /// Delirium-risk stand-in, driven mostly by consciousness and fever.
    pub fn delirium() -> Self {
        Self {
            name: "delirium-stub".into(),
            bias: -2.0,
            lookback_ms: 12 * 3_600_000,
            variables: vec![var("gcs", -0.5, 15.0), var("temp_c", 0.3, 37.0), var("heart_rate", 0.02, 80.0)],
        }
    }

    pub fn linear_term(&self, vitals: &BTreeMap<&str, Vec<(TimestampMs, f64)>>, at: TimestampMs) -> f64 {
        let mut z = self.bias;
        for v in &self.variables {
            let Some(series) = vitals.get(v.name.as_str()) else { continue };
            // series are time ordered; take the last sample at or before `at`
            let i = series.partition_point(|s| s.0 <= at);
            if let Some(&(ts, x)) = i.checked_sub(1).map(|i| &series[i]) {
                if at - ts <= self.lookback_ms && x.is_finite() {
                    z += v.weight * (x - v.reference);
                }
            }
        }
        z
    }
}

impl InferencePlugin for StubScorePlugin {
    fn info(&self) -> PluginInfo {
        PluginInfo { name: self.name.clone(), version: env!("CARGO_PKG_VERSION").into(), kind: PluginKind::Acuity }
    }

    fn infer(&self, input: &PluginInput<'_>) -> Result<PluginOutput, PluginError> {
        let PluginInput::Vitals { vitals, at } = input else {
            return Err(PluginError::WrongInput { name: self.name.clone(), input: "non-vitals" });
        };
        let z = self.linear_term(vitals, *at);
        let mut out = PluginOutput::default();
        out.scores.insert(SCORE_KEY.into(), 1.0 / (1.0 + (-z).exp()));
        Ok(out)
    }
}

/// A score every `interval_ms` through each of the study's sessions, on
/// multiples of the interval. Values are clamped to [0, 1]; non-finite
/// values and plugin failures are skipped with a warning.
pub fn score_series(
    study_id: &str,
    metric: Metric,
    plugin: &dyn InferencePlugin,
    feed: Option<&ClinicalFeed>,
    interval_ms: i64,
) -> Result<Vec<MetricPoint>, PluginError> {
    require_kind(plugin, PluginKind::Acuity)?;
    let Some(feed) = feed else {
        warn!(study_id, "no clinical feed; score series is empty");
        return Ok(Vec::new());
    };
    let vitals = feed.vitals_of(study_id);
    let mut out = Vec::new();
    for s in feed.session_of(study_id) {
        let mut t = s.admission_ts.div_euclid(interval_ms) * interval_ms;
        if t < s.admission_ts {
            t += interval_ms;
        }
        while t < s.discharge_ts {
            match plugin.infer(&PluginInput::Vitals { vitals: &vitals, at: t }) {
                Ok(o) => match o.scores.get(SCORE_KEY) {
                    Some(v) if v.is_finite() => out.push(MetricPoint {
                        study_id: study_id.into(),
                        metric,
                        ts: t,
                        value: v.clamp(0.0, 1.0),
                    }),
                    _ => warn!(study_id, ts = t, "plugin gave no finite score"),
                },
                Err(e) => warn!(study_id, ts = t, error = %e, "score plugin failed"),
            }
            t += interval_ms;
        }
    }
    Ok(out)
}
