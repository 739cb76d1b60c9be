use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Splits, Stream};
use super::pipeline::{dense_baseline, finetune_stage, load_data, plan, rank, rank_with_batch, soft_prune};
use crate::error::{Error, Result};
use crate::optimizer::{
    accuracy, compact_with, hard_prune_compact, select_structure_by, train_sgd, GroupNorm, PruneTrace, Schedule,
};
use crate::ranking::{rank_stability, ImportanceScores};
use crate::vit::{count_params, ModelWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Ranking, soft pruning, compaction, fine-tuning.
    Soft,
    /// Heads cut by rank and groups by least L1 norm straight from the dense
    /// model, then retrained.
    Hard,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Soft => "soft",
            Method::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftHardRow {
    pub method: Method,
    pub sparsity: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub params: u64,
}

fn with_sparsity(config: &ExperimentConfig, sparsity: f64) -> ExperimentConfig {
    ExperimentConfig {
        sparsity,
        output_dir: None,
        ..config.clone()
    }
}

/// Both pruning routes at every sparsity level, from one dense model and one
/// ranking. The hard route retrains under the soft route's schedule: `E`
/// epochs with the soft-stage shuffling, then the same fine-tuning.
pub fn ablate_soft_vs_hard(config: &ExperimentConfig, grid: &[f64]) -> Result<Vec<SoftHardRow>> {
    config.validate()?;
    if let Some(bad) = grid.iter().find(|s| !(0.0..1.0).contains(*s)) {
        return Err(Error::Config(format!("sparsity {bad} outside [0, 1)")));
    }
    let splits = load_data(config)?;
    let (dense, _) = dense_baseline(config, &splits)?;
    let scores = rank(config, &dense, &splits)?;
    let mut rows = Vec::with_capacity(2 * grid.len());
    for &s in grid {
        let cfg = with_sparsity(config, s);
        let soft = soft_leg(&cfg, &dense, &scores, &splits)?;
        let hard = hard_leg(&cfg, &dense, &scores, &splits)?;
        for (method, model) in [(Method::Soft, soft), (Method::Hard, hard)] {
            rows.push(SoftHardRow {
                method,
                sparsity: s,
                seed: config.seed,
                accuracy: accuracy(&model, &splits.test)?,
                params: count_params(&model, None),
            });
        }
    }
    Ok(rows)
}

fn soft_leg(
    cfg: &ExperimentConfig,
    dense: &ModelWeights,
    scores: &[ImportanceScores],
    splits: &Splits,
) -> Result<ModelWeights> {
    let (budget, masks) = plan(cfg, scores)?;
    let mut model = dense.clone();
    soft_prune(cfg, &mut model, &masks, &budget, splits)?;
    let (compacted, _) = hard_prune_compact(&model, &masks, &budget).map_err(|e| e.at_stage("hard-prune"))?;
    finetune_stage(cfg, &compacted, splits)
}

fn hard_leg(
    cfg: &ExperimentConfig,
    dense: &ModelWeights,
    scores: &[ImportanceScores],
    splits: &Splits,
) -> Result<ModelWeights> {
    let (budget, masks) = plan(cfg, scores)?;
    let structure = select_structure_by(dense, &masks, &budget, GroupNorm::L1).map_err(|e| e.at_stage("hard-prune"))?;
    let mut model = compact_with(dense, &structure).map_err(|e| e.at_stage("hard-prune"))?;
    let o = &cfg.optimizer;
    let schedule = Schedule {
        epochs: o.epochs,
        batch_size: o.batch_size,
        seed: cfg.stream_seed(Stream::Soft),
    };
    train_sgd(&mut model, &splits.train, &splits.val, &schedule, o.eta).map_err(|e| e.at_stage("retrain"))?;
    finetune_stage(cfg, &model, splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub block: usize,
    pub batch_a: usize,
    pub batch_b: usize,
    pub kendall_tau: f64,
}

/// Kendall tau between the rankings from every pair of batch sizes, per
/// block. Smaller batches are prefixes of larger ones.
pub fn ablate_batch_size(config: &ExperimentConfig, grid: &[usize]) -> Result<Vec<StabilityRow>> {
    config.validate()?;
    let splits = load_data(config)?;
    let (dense, _) = dense_baseline(config, &splits)?;
    batch_stability(config, &dense, &splits, grid)
}

pub fn batch_stability(
    config: &ExperimentConfig,
    model: &ModelWeights,
    splits: &Splits,
    grid: &[usize],
) -> Result<Vec<StabilityRow>> {
    let rankings = grid
        .iter()
        .map(|&b| rank_with_batch(config, model, splits, b).map_err(|e| e.at_stage("rank")))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            for (a, b) in rankings[i].iter().zip(&rankings[j]) {
                rows.push(StabilityRow {
                    block: a.block,
                    batch_a: grid[i],
                    batch_b: grid[j],
                    kendall_tau: rank_stability(a, b)?,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoTrace {
    pub rho: f64,
    pub trace: PruneTrace,
}

/// One soft-pruning trace per ρ, all from the same dense model, masks,
/// budgets and shuffling seed.
pub fn ablate_rho(config: &ExperimentConfig, grid: &[f64]) -> Result<Vec<RhoTrace>> {
    config.validate()?;
    let splits = load_data(config)?;
    let (dense, _) = dense_baseline(config, &splits)?;
    rho_traces(config, &dense, &splits, grid)
}

pub fn rho_traces(
    config: &ExperimentConfig,
    dense: &ModelWeights,
    splits: &Splits,
    grid: &[f64],
) -> Result<Vec<RhoTrace>> {
    let scores = rank(config, dense, splits)?;
    let (budget, masks) = plan(config, &scores)?;
    grid.iter()
        .map(|&rho| {
            let mut cfg = config.clone();
            cfg.optimizer.rho = rho;
            cfg.validate()?;
            let mut model = dense.clone();
            let trace = soft_prune(&cfg, &mut model, &masks, &budget, splits)?;
            Ok(RhoTrace { rho, trace })
        })
        .collect()
}
