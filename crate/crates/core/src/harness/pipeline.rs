use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Splits, Stream};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::optimizer::{
    accuracy, admm_init, finetune, hard_prune_compact, run_soft_pruning, train_sgd, EpochStats, PruneTrace, Schedule,
    StructuralReport, TraceRecord,
};
use crate::ranking::{build_head_mask, export_ranking, rank_heads, HeadMask, ImportanceScores};
use crate::sparsity::{er_allocate, group_l0_columns, group_l0_heads, SparsityBudget};
use crate::vit::checkpoint::{read_checkpoint, write_checkpoint};
use crate::vit::{
    count_flops, count_params, count_params_for, forward, load_checkpoint_for, save_checkpoint, BlockShape,
    ModelWeights, StructuralMask, VitConfig,
};

/// Per-block outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub kappa_attn_h: usize,
    pub kappa_attn_c: usize,
    pub kappa_mlp_c: usize,
    pub scores: Vec<f64>,
    pub kept_heads: Vec<usize>,
    pub head_dims: Vec<usize>,
    pub mlp_units: Vec<usize>,
    pub params_before: u64,
    pub params_after: u64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub target_sparsity: f64,
    pub realized_sparsity: f64,
    pub baseline_accuracy: f64,
    pub hard_prune_accuracy: f64,
    pub pruned_accuracy: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub blocks: Vec<BlockReport>,
    /// Every block re-checked from the written checkpoint.
    pub constraints_verified: bool,
    pub normalization: Normalization,
    pub trace: PruneTrace,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// The report with timing removed, for run-to-run comparison.
    pub fn outcome(&self) -> RunReport {
        RunReport {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(name))
}

pub fn load_data(config: &ExperimentConfig) -> Result<Splits> {
    stage("data", config.data.load())
}

/// Loads the configured baseline checkpoint or trains a dense model from
/// scratch.
pub fn dense_baseline(config: &ExperimentConfig, splits: &Splits) -> Result<(ModelWeights, Vec<EpochStats>)> {
    stage(
        "dense",
        (|| {
            if let Some(path) = &config.baseline {
                return Ok((load_checkpoint_for(path, &config.model)?, Vec::new()));
            }
            let mut model = ModelWeights::init(&config.model, config.stream_seed(Stream::Init))?;
            let o = &config.optimizer;
            let schedule = Schedule {
                epochs: o.dense_epochs,
                batch_size: o.batch_size,
                seed: config.stream_seed(Stream::Dense),
            };
            let stats = train_sgd(&mut model, &splits.train, &splits.val, &schedule, o.dense_eta())?;
            Ok((model, stats))
        })(),
    )
}

/// The first `n` indices of a seeded permutation of `0..len`; smaller
/// batches are prefixes of larger ones.
pub fn ranking_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx.truncate(n.min(len));
    idx
}

/// Scores every head of `model` from a sampled batch of `batch` images.
pub fn rank_with_batch(
    config: &ExperimentConfig,
    model: &ModelWeights,
    splits: &Splits,
    batch: usize,
) -> Result<Vec<ImportanceScores>> {
    let cfg = crate::ranking::RankingConfig {
        batch_size: batch,
        ..config.ranking.clone()
    };
    cfg.validate()?;
    let idx = ranking_indices(splits.train.len(), batch, config.stream_seed(Stream::RankingBatch));
    let (images, _) = splits.train.batch(&idx);
    let (_, capture) = forward(model, &images, true)?;
    rank_heads(&capture.expect("capture requested"), &cfg)
}

pub fn rank(config: &ExperimentConfig, model: &ModelWeights, splits: &Splits) -> Result<Vec<ImportanceScores>> {
    stage(
        "rank",
        rank_with_batch(config, model, splits, config.ranking.batch_size),
    )
}

/// Budgets for the configured sparsity and the head masks they imply. A
/// sparsity of 0 keeps everything.
pub fn plan(config: &ExperimentConfig, scores: &[ImportanceScores]) -> Result<(SparsityBudget, Vec<HeadMask>)> {
    stage(
        "allocate",
        (|| {
            let budget = if config.sparsity == 0.0 {
                SparsityBudget::full(&config.model)
            } else {
                er_allocate(&config.model, config.sparsity)?
            };
            let masks = scores
                .iter()
                .zip(&budget.blocks)
                .map(|(s, b)| build_head_mask(s, b.kappa_attn_h))
                .collect::<Result<Vec<_>>>()?;
            Ok((budget, masks))
        })(),
    )
}

fn prunes_nothing(config: &VitConfig, budget: &SparsityBudget) -> bool {
    budget.blocks == SparsityBudget::full(config).blocks
}

/// `E` epochs of soft pruning. With nothing to prune the constraint sets are
/// the whole space, so the stage is plain SGD under the same schedule.
pub fn soft_prune(
    config: &ExperimentConfig,
    model: &mut ModelWeights,
    masks: &[HeadMask],
    budget: &SparsityBudget,
    splits: &Splits,
) -> Result<PruneTrace> {
    stage(
        "soft-prune",
        (|| {
            let o = &config.optimizer;
            let seed = config.stream_seed(Stream::Soft);
            if prunes_nothing(&config.model, budget) {
                let schedule = Schedule {
                    epochs: o.epochs,
                    batch_size: o.batch_size,
                    seed,
                };
                let stats = train_sgd(model, &splits.train, &splits.val, &schedule, o.eta)?;
                return Ok(PruneTrace {
                    initial_masked_norm: 0.0,
                    records: stats
                        .into_iter()
                        .map(|s| TraceRecord {
                            epoch: s.epoch,
                            loss: s.loss,
                            masked_norm: 0.0,
                            primal_residual_attn: 0.0,
                            primal_residual_mlp: 0.0,
                            val_acc: s.val_acc,
                        })
                        .collect(),
                });
            }
            let mut state = admm_init(model, o.hyper(), o.epochs)?;
            run_soft_pruning(
                model,
                masks,
                budget,
                &mut state,
                &splits.train,
                &splits.val,
                o.batch_size,
                seed,
            )
        })(),
    )
}

pub fn finetune_stage(config: &ExperimentConfig, model: &ModelWeights, splits: &Splits) -> Result<ModelWeights> {
    stage(
        "finetune",
        (|| {
            let o = &config.optimizer;
            let schedule = Schedule {
                epochs: o.finetune_epochs(),
                batch_size: o.batch_size,
                seed: config.stream_seed(Stream::Finetune),
            };
            Ok(finetune(model, &splits.train, &splits.val, &schedule, o.eta)?.model)
        })(),
    )
}

/// Parameters owned by one block of the given shape.
pub fn block_params(config: &VitConfig, shape: &BlockShape) -> u64 {
    let mask = StructuralMask {
        blocks: vec![shape.clone()],
        keep_embeddings: false,
    };
    count_params_for(config, &mask)
        - count_params_for(
            config,
            &StructuralMask {
                blocks: vec![],
                keep_embeddings: false,
            },
        )
}

/// Checks a compacted model against its budgets: tensor widths and nonzero
/// group counts must both match exactly.
pub fn verify_constraints(model: &ModelWeights, budget: &SparsityBudget) -> Result<()> {
    if model.blocks.len() != budget.blocks.len() {
        return Err(Error::Contract("block count differs from budget".into()));
    }
    for (l, (block, b)) in model.blocks.iter().zip(&budget.blocks).enumerate() {
        let attn = block.attn_group_matrix();
        let heads = group_l0_heads(&attn, &block.layout.head_dims)?;
        let got = (
            block.layout.num_heads(),
            heads,
            block.attn_width(),
            group_l0_columns(&attn),
            block.mlp_hidden(),
            group_l0_columns(&block.mlp_group_matrix()),
        );
        let want = (
            b.kappa_attn_h,
            b.kappa_attn_h,
            b.kappa_attn_c,
            b.kappa_attn_c,
            b.kappa_mlp_c,
            b.kappa_mlp_c,
        );
        if got != want {
            return Err(Error::Contract(format!(
                "block {l}: (heads, live heads, channels, live channels, units, live units) = {got:?}, budget {want:?}"
            )));
        }
    }
    Ok(())
}

/// Runs every stage end to end.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    stage("config", config.validate())?;
    let out_dir = config.output_dir.as_deref();
    if let Some(dir) = out_dir {
        stage("output", fs::create_dir_all(dir).map_err(Error::from))?;
        stage("output", write_text(&dir.join("config.toml"), &config.to_toml()?))?;
    }
    let splits = load_data(config)?;
    let (dense, _) = dense_baseline(config, &splits)?;
    save_stage(out_dir, "dense.ckpt", &dense)?;
    let baseline_accuracy = stage("evaluate", accuracy(&dense, &splits.test))?;

    let scores = rank(config, &dense, &splits)?;
    let (budget, masks) = plan(config, &scores)?;
    if let Some(dir) = out_dir {
        stage(
            "output",
            write_text(&dir.join("ranking.txt"), &export_ranking(&scores, &masks)),
        )?;
        stage(
            "output",
            write_text(&dir.join("budget.csv"), &super::report::budget_csv(&budget)),
        )?;
    }

    let mut soft = dense.clone();
    let trace = soft_prune(config, &mut soft, &masks, &budget, &splits)?;
    save_stage(out_dir, "soft.ckpt", &soft)?;
    if let Some(dir) = out_dir {
        stage("output", write_text(&dir.join("trace.csv"), &trace.to_csv()))?;
    }

    let (compacted, structure) = stage("hard-prune", hard_prune_compact(&soft, &masks, &budget))?;
    save_stage(out_dir, "compact.ckpt", &compacted)?;
    let hard_prune_accuracy = stage("evaluate", accuracy(&compacted, &splits.test))?;

    let tuned = finetune_stage(config, &compacted, &splits)?;
    save_stage(out_dir, "finetuned.ckpt", &tuned)?;

    // Re-read what was written and check it, rather than trusting the
    // optimizer's bookkeeping.
    let reloaded = stage("verify", reload(&tuned))?;
    stage("verify", verify_constraints(&reloaded, &budget))?;
    let pruned_accuracy = stage("evaluate", accuracy(&reloaded, &splits.test))?;

    let report = assemble_report(
        config,
        &dense,
        &reloaded,
        &scores,
        &budget,
        &structure,
        [baseline_accuracy, hard_prune_accuracy, pruned_accuracy],
        splits.train.normalization,
        trace,
        started.elapsed().as_secs_f64(),
    );
    if let Some(dir) = out_dir {
        stage("report", super::report::write_run_artifacts(dir, &report))?;
    }
    Ok(report)
}

fn reload(model: &ModelWeights) -> Result<ModelWeights> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    read_checkpoint(&bytes)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::from)
}

fn save_stage(dir: Option<&Path>, name: &str, model: &ModelWeights) -> Result<()> {
    match dir {
        Some(dir) => stage("output", save_checkpoint(model, dir.join(name))),
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble_report(
    config: &ExperimentConfig,
    dense: &ModelWeights,
    pruned: &ModelWeights,
    scores: &[ImportanceScores],
    budget: &SparsityBudget,
    structure: &StructuralReport,
    [baseline_accuracy, hard_prune_accuracy, pruned_accuracy]: [f64; 3],
    normalization: Normalization,
    trace: PruneTrace,
    wall_clock_seconds: f64,
) -> RunReport {
    let c = &config.model;
    let tokens = c.tokens();
    let before_mask = StructuralMask::from_model(dense);
    let after_mask = StructuralMask::from_model(pruned);
    let params_before = count_params(dense, None);
    let params_after = count_params(pruned, None);
    let blocks = (0..c.num_blocks)
        .map(|l| {
            let before = block_params(c, &before_mask.blocks[l]);
            let after = block_params(c, &after_mask.blocks[l]);
            let b = budget.blocks[l];
            let s = &structure.blocks[l];
            BlockReport {
                block: l,
                kappa_attn_h: b.kappa_attn_h,
                kappa_attn_c: b.kappa_attn_c,
                kappa_mlp_c: b.kappa_mlp_c,
                scores: scores[l].scores.clone(),
                kept_heads: s.heads.clone(),
                head_dims: s.head_dims.clone(),
                mlp_units: s.units.clone(),
                params_before: before,
                params_after: after,
                sparsity: 1.0 - after as f64 / before as f64,
            }
        })
        .collect();
    RunReport {
        seed: config.seed,
        target_sparsity: config.sparsity,
        realized_sparsity: 1.0 - params_after as f64 / params_before as f64,
        baseline_accuracy,
        hard_prune_accuracy,
        pruned_accuracy,
        params_before,
        params_after,
        flops_before: count_flops(c, Some(&before_mask), tokens),
        flops_after: count_flops(c, Some(&after_mask), tokens),
        blocks,
        constraints_verified: true,
        normalization,
        trace,
        wall_clock_seconds,
    }
}

/// Parameter and FLOP counts implied by a budget, without building or
/// training anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DryRun {
    pub budget: SparsityBudget,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
}

pub fn dry_run(config: &VitConfig, sparsity: f64) -> Result<DryRun> {
    let budget = er_allocate(config, sparsity)?;
    let full = StructuralMask::full(config);
    let pruned = budget.structural_mask();
    let t = config.tokens();
    Ok(DryRun {
        params_before: count_params_for(config, &full),
        params_after: count_params_for(config, &pruned),
        flops_before: count_flops(config, Some(&full), t),
        flops_after: count_flops(config, Some(&pruned), t),
        budget,
    })
}
