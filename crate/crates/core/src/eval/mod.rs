//! Embedding extraction, trial scoring under every condition, score fusion,
//! equal error rates and report tables.

mod eer;
mod report;
mod scoring;

pub use eer::{brute_force_eer, compute_eer, EerResult};
pub use report::{report_table, Report, ReportRow};
pub use scoring::{
    condition_sides, cosine, format_score, format_score_file, fuse_scores, sample_embedding, score_condition, score_trials,
    EmbeddingKind, ReportCondition, ScoreSet,
};
