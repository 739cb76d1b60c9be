//! Experiment configuration, the end-to-end pruning pipeline, ablation
//! suites and report emission.

mod ablation;
mod config;
mod pipeline;
pub mod report;

pub use crate::data::{gen_synthetic, load_cifar10, Dataset, SyntheticSpec};
pub use ablation::{
    ablate_batch_size, ablate_rho, ablate_soft_vs_hard, batch_stability, rho_traces, Method, RhoTrace, SoftHardRow,
    StabilityRow,
};
pub use config::{DataSpec, ExperimentConfig, OptimizerConfig, Splits, DATA_ROOT_ENV, VALIDATION_FRACTION};
pub use pipeline::{
    block_params, dense_baseline, dry_run, finetune_stage, load_data, plan, rank, rank_with_batch, ranking_indices,
    run_pipeline, soft_prune, verify_constraints, BlockReport, DryRun, RunReport,
};
