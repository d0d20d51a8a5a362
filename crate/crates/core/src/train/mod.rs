//! Optimisation, staged training, checkpoints, feature caching and metrics.

pub mod ablation;
pub mod cache;
pub mod checkpoint;
pub mod data;
pub mod early_stop;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod trainer;

pub use ablation::{run_ablation, AblationConfig, AblationResult};
pub use cache::FeatureCache;
pub use checkpoint::Checkpoint;
pub use data::{Dataset, Sample};
pub use early_stop::{run_epochs, Decision, EarlyStopping};
pub use loss::bce_loss;
pub use metrics::{agreement, format_report, parse_report, Agreement, ConfusionCounts, Evaluation, SubjectResult};
pub use optim::SgdMomentum;
pub use pipeline::{
    evaluate_variant, predict_variant, prepare_samples, run_stage_pipeline, sample_index, PipelineConfig,
    PipelineSummary, PreparedSample, RunPaths, SampleInfo, StageSummary,
};
pub use trainer::{predict, train_model, EpochStats, Prediction, TrainConfig, TrainOutcome};
