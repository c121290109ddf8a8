//! Two-stage training pipeline, experiment drivers, artifacts and reports.

pub mod artifact;
pub mod config;
pub mod experiments;
pub mod model;
pub mod optimizer;
pub mod report;
pub mod trainer;

pub use artifact::{MetricsJson, RunKind, RunMeta, RunPaths};
pub use config::{ModalitySection, MomentumSetting, PerModality, RunConfig, VariantTag};
pub use experiments::{
    consistency_ratio_experiment, grid_search, retention_dataset, sweep, GridSpace, SweepParam,
};
pub use model::CmcModel;
pub use report::{report, ReportFormat};
pub use trainer::{evaluate_run, finetune_multimodal, pretrain_unimodal, run_two_stage};
