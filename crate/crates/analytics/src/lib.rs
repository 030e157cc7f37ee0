//! Annotation data model, agreement statistics and active-learning scores.
//!
//! Everything here is a pure function of an annotation snapshot: Fleiss κ
//! and weekly activity summaries, expected calibration error, annotator
//! quality, weighted consensus, ensemble weighting, per-class priorities and
//! box clustering. [`store`] is the append-only JSONL file the server writes
//! through and [`queue`] assembles the ranked re-annotation queues.

pub mod active;
pub mod boxes;
pub mod calibration;
pub mod kappa;
pub mod model;
pub mod quality;
pub mod queue;
pub mod store;
pub mod weekly;

pub use active::{al_score_labeled, al_score_unlabeled, ensemble_weights};
pub use boxes::{cluster_boxes, iou, BoxCluster, BoxClustering};
pub use calibration::{expected_calibration_error, CalibrationError};
pub use kappa::{fleiss_kappa, Kappa, KappaError, KappaReport};
pub use model::{
    ActiveLearningScore, AnnotationError, AnnotatorQuality, AuAnnotation, AuLabel, AuPrediction, BBox, BoxAnnotation, BoxLabel,
    BoxPrediction, BoxProposal, LabeledBox,
};
pub use quality::{annotator_quality, consensus, vote, ClassConsensus, ConsensusError, ItemConsensus};
pub use queue::{depth_queue, face_queue, AlConfig, FaceQueue, QueueEntry};
pub use store::{AnnotationStore, StoreError, Task};
pub use weekly::{weekly_summary, WeeklySummary};
