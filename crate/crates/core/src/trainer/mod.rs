//! Training, evaluation, metrics and k-fold orchestration.

pub mod experiment;
pub mod metrics;
pub mod train;

pub use self::experiment::{
    ablation_csv, aggregate_folds, ABLATION_FILE, REPORT_FILE, fold_seed, run_ablation, run_experiment, run_experiment_on, DataSource,
    ExperimentConfig, ExperimentReport, FoldEntry, FoldSummary,
};
pub use self::metrics::{average, compute_metrics, ConfusionCounts, MetricSummary, MetricsReport, METRIC_NAMES};
pub use self::train::{
    cross_entropy, evaluate, predict_row, train_fold, EpochRecord, FoldData, FoldOutputs, FoldResults, Hyperparams,
    SplitResult,
};
