//! Verification scoring: cosine scores, adaptive s-norm, quality-aware
//! calibration, and the EER / minDCF detection metrics.

pub mod calibration;
pub mod metrics;
pub mod snorm;
pub mod trials;

pub use calibration::{fit_calibration, CalibrationModel, QualityFeatures};
pub use metrics::{cosine_score, eer, min_dcf, operating_points, DetMetrics, OperatingPoint};
pub use snorm::{adaptive_snorm, snorm_from_stats, Cohort, CohortStats};
pub use trials::{
    read_scores, score_trials, write_scores, EmbeddingTable, ScoreOptions, Trial, TrialList,
};
