//! Per-patient metrics over stored records: inference plugins, visitation,
//! environment statistics, nightly disruptions and feed-driven scores,
//! written as line-delimited `MetricPoint`s.

pub mod engine;
pub mod env;
pub mod intervals;
pub mod plugin;
pub mod score;
pub mod time;
pub mod visits;

pub use engine::{compute_study_metrics, metrics_digest, write_metrics, Metric, MetricPoint, MetricsConfig, MetricsError, MetricsReport, Plugins};
pub use env::{env_stats, ChannelStats, EnvWindowStats};
pub use intervals::{merge_close, Interval, RunBuilder};
pub use plugin::{
    run_au_inference, FaceDetectPlugin, InferencePlugin, MockAuPlugin, PluginError, PluginInfo, PluginInput, PluginKind,
    PluginOutput, PosturePlugin,
};
pub use score::{score_series, ScoreVariable, StubScorePlugin};
pub use time::DayClock;
pub use visits::{
    nightly_disruptions, person_count_series, visitation, CountPoint, DisruptionRule, NightCount, Period, Visit, VisitCounts, VisitRule,
};
