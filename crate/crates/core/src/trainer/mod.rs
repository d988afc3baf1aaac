//! Optimizer, checkpoints, the training phases and the ablation grid.

pub mod ablation;
pub mod adamw;
pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod phases;
pub mod pipeline;

pub use ablation::{default_grid, k_sweep_grid, run_ablation, run_cell, AblationCell, AblationReport, CellResult, Schedule};
pub use adamw::{adamw_step, AdamState, AdamWConfig};
pub use checkpoint::Checkpoint;
pub use config::{Phase0Config, RunConfig, Stage1Eval, StageConfig, TrainConfig};
pub use manifest::{version_string, Manifest};
pub use phases::{
    frozen_digests, param_digests, pretrain_backbone, stage1, stage2, train_epochs, EpochRecord, Model, PhaseOutcome,
    PhaseReport, TestMetrics,
};
pub use pipeline::{run_baselines, run_pipeline, shortcut_checks, Baselines, Check, Pipeline};
