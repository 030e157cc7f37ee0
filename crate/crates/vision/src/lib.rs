//! Annotation-candidate pipelines over stored camera records.
//!
//! The face pipeline keeps RGB frames near reported pain, resamples them,
//! and crops frames that show exactly one face. The depth pipeline renders
//! depth frames as colormaps, keeps those with a person in view and drops
//! near-duplicates of the last kept frame.

pub mod colormap;
pub mod detect;
pub mod pipeline;
pub mod select;
pub mod ssim;

pub use colormap::{colormap_indices, depth_to_colormap, percentile_lower, JET};
pub use detect::{
    blobs, filter_person_frames, filter_single_face, BlobFaceDetector, Detection, DetectError, Detector, FaceCrop, FilterStats,
    PixelBox,
    SilhouetteDetector,
};
pub use pipeline::{read_candidates, run_depth_pipeline, run_face_pipeline, Candidate, PipelineConfig, PipelineError, PipelineReport};
pub use select::{extract_frames, filter_by_pain_window, SelectError, PAIN_WINDOW_MS};
pub use ssim::{dedup_successive, ssim, SsimError, C1, C2, DEFAULT_DEDUP_THRESHOLD};
