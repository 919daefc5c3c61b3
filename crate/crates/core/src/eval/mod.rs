//! Retrieval and zero-shot evaluation.

pub mod metrics;
pub mod report;

pub use metrics::{
    confusion_matrix, mean_average_precision, recall_at_k, write_confusion_csv, zero_shot_topk, SimilarityMatrix,
};
pub use report::{build_report, t2i_r1, RetrievalReport, ZeroShotInputs};
