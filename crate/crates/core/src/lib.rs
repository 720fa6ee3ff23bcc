//! Content-based whole-slide image (WSI) retrieval.
//!
//! A slide is represented by a *mosaic*: a small, spatially spread subset of its
//! tissue patches chosen by clustering patch color descriptors. Each mosaic patch
//! is embedded by some external backbone, and two slides are compared with the
//! median-of-minimum set distance. Retrieval runs leave-one-patient-out over a
//! dataset manifest and classifies each query by majority vote over its top-k
//! retrieved slides; predictions are scored with per-class and macro F1.
//!
//! Module map:
//! - [`model`]: patches, embedding sets, manifests and evaluation config.
//! - [`mosaic`]: seeded k-means over color features and farthest-point sampling.
//! - [`metric`]: patch distances, min-max barcodes, median-of-minimum.
//! - [`retrieval`]: ranking, majority vote, leave-one-patient-out evaluation.
//! - [`report`]: confusion matrices, F1 scores and comparison tables.
//! - [`storage`]: binary embedding files, patch tables, manifests, prediction CSVs.

pub mod metric;
pub mod model;
pub mod mosaic;
pub mod report;
pub mod retrieval;
pub mod storage;

pub use metric::{
    binarize_minmax, median_of_min, pairwise_min_profile, patch_distance, MetricError,
    PatchDistanceMetric,
};
pub use model::{
    validate_manifest, DatasetManifest, EmbeddingKind, EmbeddingSet, EvalConfig, LabelGranularity,
    MedianRule, ModelError, PatchRecord, PredictionRow, Violation, WsiRecord,
};
pub use mosaic::{build_mosaic, cluster_patches, MosaicError, MosaicParams};
pub use report::{
    confusion, f1_scores, render_table, ConfusionMatrix, EvalReport, F1Scores, ReportError,
    TableFormat,
};
pub use retrieval::{
    evaluate_lopo, majority_vote, retrieve, Candidate, LopoEvaluation, RankedRetrieval,
    RetrievalError, VoteResult,
};
