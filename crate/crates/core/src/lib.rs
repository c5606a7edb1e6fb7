//! Comprehensive personalized ranking: Bayesian learning of low-rank user
//! and item factors from one-bit item-item and user-user comparisons, with
//! kNN and truncated-SVD reference methods and rank-sweep evaluation.

pub mod baselines;
pub mod comparisons;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod ingest;
pub mod model;
pub mod optimizer;
pub mod ratings;

pub use baselines::{knn_complete, svd_complete, truncate_rank, KnnConfig, KnnMode, Similarity};
pub use comparisons::{
    extract_comparisons, load_comparisons, store_comparisons, transitive_closure, Comparison, ComparisonSet,
    ItemComparison, UserComparison,
};
pub use error::{Error, Result};
pub use evaluation::{
    count_mismatches, detect_knee, normalize_series, rank_sweep, singular_diagnostics, Method, MetricSeries,
    Normalization, SweepOptions,
};
pub use experiment::{run_experiment, ExperimentConfig};
pub use ingest::{parse_movielens, select_subset, synthesize, Dataset, IdMap, SubsetRule, SynthConfig};
pub use model::{
    cpr_objective, link, log_link, pairwise_score_item, pairwise_score_user, recover_matrix, score, Hyperparams,
    ModelParams,
};
pub use optimizer::{
    accumulate_gradient, full_gradient, grad_log_link, init_params, train, train_from, GradientBuffer,
    LearningRateSchedule, StoppingRule, TrainOptions, TrainReport,
};
pub use ratings::{Rating, RatingMatrix, RatingScale};
