//! Augmented-Lagrangian soft pruning, hard compaction and fine-tuning.
//!
//! Weights of each block are handled through their group matrices (one column
//! per attention channel or MLP hidden unit, see
//! [`BlockWeights::attn_group_matrix`]). `Z` and `U` live in that same layout.
//! Parameters outside the groups (embeddings, norms, output biases and the
//! classifier) follow plain SGD throughout.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::ranking::HeadMask;
use crate::sparsity::{
    column_norms_l1, column_norms_sq, project_column_sparse, project_masked_attention, top_k, SparsityBudget,
};
use crate::vit::{count_params, logits, loss_and_gradients, BlockWeights, ModelWeights};

/// Where the learning rate applies in the weight step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaPlacement {
    /// `W − η·(∇ℓ + λ(1−M)⊙W + ρ(W − Z + U))`: gradient descent on the
    /// augmented Lagrangian.
    #[default]
    Full,
    /// `W − η·∇ℓ − λ(1−M)⊙W − ρ(W − Z + U)`: only the loss gradient is scaled.
    LossOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmHyper {
    pub rho: f64,
    pub lambda: f64,
    pub eta: f64,
    #[serde(default)]
    pub eta_placement: EtaPlacement,
}

impl AdmmHyper {
    fn step(&self, grad: f64, mask_term: f64, penalty: f64) -> f64 {
        match self.eta_placement {
            EtaPlacement::Full => self.eta * (grad + self.lambda * mask_term + self.rho * penalty),
            EtaPlacement::LossOnly => self.eta * grad + self.lambda * mask_term + self.rho * penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub z_attn: Vec<Tensor>,
    pub z_mlp: Vec<Tensor>,
    pub u_attn: Vec<Tensor>,
    pub u_mlp: Vec<Tensor>,
    pub hyper: AdmmHyper,
    pub epoch: usize,
    pub epochs: usize,
}

/// `Z := W`, `U := 0` for every block.
pub fn admm_init(model: &ModelWeights, hyper: AdmmHyper, epochs: usize) -> Result<AdmmState> {
    if !(hyper.rho > 0.0 && hyper.eta > 0.0 && hyper.lambda >= 0.0)
        || !(hyper.rho.is_finite() && hyper.eta.is_finite() && hyper.lambda.is_finite())
    {
        return Err(Error::Config(format!(
            "need rho > 0, eta > 0, lambda >= 0; got rho={}, eta={}, lambda={}",
            hyper.rho, hyper.eta, hyper.lambda
        )));
    }
    let z_attn: Vec<Tensor> = model.blocks.iter().map(BlockWeights::attn_group_matrix).collect();
    let z_mlp: Vec<Tensor> = model.blocks.iter().map(BlockWeights::mlp_group_matrix).collect();
    let u_attn = z_attn.iter().map(|z| Tensor::zeros(z.shape())).collect();
    let u_mlp = z_mlp.iter().map(|z| Tensor::zeros(z.shape())).collect();
    Ok(AdmmState {
        z_attn,
        z_mlp,
        u_attn,
        u_mlp,
        hyper,
        epoch: 0,
        epochs,
    })
}

fn check_same(op: &'static str, tensors: &[&Tensor]) -> Result<()> {
    let shape = tensors[0].shape();
    if let Some(t) = tensors.iter().find(|t| t.shape() != shape) {
        return Err(Error::dim(op, format!("{:?} vs {:?}", shape, t.shape())));
    }
    Ok(())
}

/// One step on an attention group matrix. `keep[c]` marks channels of kept
/// heads; the λ term acts on the others.
pub fn update_weights_attn(
    w: &Tensor,
    grad: &Tensor,
    keep: &[bool],
    z: &Tensor,
    u: &Tensor,
    hyper: &AdmmHyper,
) -> Result<Tensor> {
    check_same("update_weights_attn", &[w, grad, z, u])?;
    if keep.len() != w.cols() {
        return Err(Error::dim(
            "update_weights_attn",
            format!("{} mask flags for {} columns", keep.len(), w.cols()),
        ));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            op: "update_weights_attn",
        });
    }
    let cols = w.cols();
    let mut out = w.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let wi = w.data()[i];
        let mask_term = if keep[i % cols] { 0.0 } else { wi };
        let penalty = wi - z.data()[i] + u.data()[i];
        *v = wi - hyper.step(grad.data()[i], mask_term, penalty);
    }
    Ok(out)
}

/// One step on an MLP group matrix.
pub fn update_weights_mlp(w: &Tensor, grad: &Tensor, z: &Tensor, u: &Tensor, hyper: &AdmmHyper) -> Result<Tensor> {
    check_same("update_weights_mlp", &[w, grad, z, u])?;
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            op: "update_weights_mlp",
        });
    }
    let mut out = w.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let wi = w.data()[i];
        *v = wi - hyper.step(grad.data()[i], 0.0, wi - z.data()[i] + u.data()[i]);
    }
    Ok(out)
}

fn check_masks(model: &ModelWeights, masks: &[HeadMask], budget: &SparsityBudget) -> Result<()> {
    if masks.len() != model.blocks.len() || budget.blocks.len() != model.blocks.len() {
        return Err(Error::Contract(format!(
            "{} blocks, {} head masks, {} block budgets",
            model.blocks.len(),
            masks.len(),
            budget.blocks.len()
        )));
    }
    for (l, (block, mask)) in model.blocks.iter().zip(masks).enumerate() {
        if mask.num_heads != block.layout.num_heads() {
            return Err(Error::Contract(format!(
                "block {l}: mask over {} heads, block has {}",
                mask.num_heads,
                block.layout.num_heads()
            )));
        }
    }
    Ok(())
}

/// `Z_attn := 𝒫_M(W_attn + U_attn)`, `Z_mlp := 𝒫(W_mlp + U_mlp)` per block.
pub fn update_z(
    state: &mut AdmmState,
    model: &ModelWeights,
    masks: &[HeadMask],
    budget: &SparsityBudget,
) -> Result<()> {
    check_masks(model, masks, budget)?;
    for (l, block) in model.blocks.iter().enumerate() {
        let b = budget.blocks[l];
        let keep = masks[l].channel_mask(&block.layout.head_dims);
        let wa = block.attn_group_matrix().add(&state.u_attn[l])?;
        state.z_attn[l] = project_masked_attention(&wa, &keep, b.kappa_attn_c)?;
        let wm = block.mlp_group_matrix().add(&state.u_mlp[l])?;
        state.z_mlp[l] = project_column_sparse(&wm, b.kappa_mlp_c)?;
    }
    Ok(())
}

/// `U += W − Z` for both families.
pub fn update_u(state: &mut AdmmState, model: &ModelWeights) -> Result<()> {
    for (l, block) in model.blocks.iter().enumerate() {
        let da = block.attn_group_matrix().sub(&state.z_attn[l])?;
        state.u_attn[l].axpy(1.0, &da)?;
        let dm = block.mlp_group_matrix().sub(&state.z_mlp[l])?;
        state.u_mlp[l].axpy(1.0, &dm)?;
    }
    Ok(())
}

/// `‖(1−M)⊙W_attn‖_F` over all blocks: the norm of every parameter owned by
/// a removed head.
pub fn masked_norm(model: &ModelWeights, masks: &[HeadMask]) -> f64 {
    let mut acc = 0.0;
    for (block, mask) in model.blocks.iter().zip(masks) {
        let keep = mask.channel_mask(&block.layout.head_dims);
        let norms = column_norms_sq(&block.attn_group_matrix());
        acc += norms
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| !k)
            .map(|(n, _)| n)
            .sum::<f64>();
    }
    acc.sqrt()
}

/// `(‖W_attn − Z_attn‖_F, ‖W_mlp − Z_mlp‖_F)` over all blocks.
pub fn primal_residuals(state: &AdmmState, model: &ModelWeights) -> Result<(f64, f64)> {
    let (mut a, mut m) = (0.0, 0.0);
    for (l, block) in model.blocks.iter().enumerate() {
        a += block
            .attn_group_matrix()
            .sub(&state.z_attn[l])?
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>();
        m += block
            .mlp_group_matrix()
            .sub(&state.z_mlp[l])?
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>();
    }
    Ok((a.sqrt(), m.sqrt()))
}

/// Augmented Lagrangian at the current point, given the loss value. The
/// indicator terms are zero because `Z` is always kept feasible.
pub fn lagrangian_value(state: &AdmmState, model: &ModelWeights, masks: &[HeadMask], loss: f64) -> Result<f64> {
    let sq = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
    let h = &state.hyper;
    let mn = masked_norm(model, masks);
    let mut value = loss + 0.5 * h.lambda * mn * mn;
    for (l, block) in model.blocks.iter().enumerate() {
        let mut ra = block.attn_group_matrix().sub(&state.z_attn[l])?;
        ra.axpy(1.0, &state.u_attn[l])?;
        let mut rm = block.mlp_group_matrix().sub(&state.z_mlp[l])?;
        rm.axpy(1.0, &state.u_mlp[l])?;
        value += 0.5 * h.rho * (sq(&ra) + sq(&state.u_attn[l]) + sq(&rm) + sq(&state.u_mlp[l]));
    }
    Ok(value)
}

/// Epoch count, minibatch size and shuffling seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Schedule {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx
}

/// Top-1 accuracy, evaluated in chunks.
pub fn accuracy(model: &ModelWeights, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(256) {
        let (images, labels) = data.batch(chunk);
        let out = logits(model, &images)?;
        for (r, &label) in labels.iter().enumerate() {
            let row = out.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn grads_as_model(model: &ModelWeights, grads: Vec<Tensor>) -> ModelWeights {
    let mut g = model.clone();
    for (dst, src) in g.tensors_mut().into_iter().zip(grads) {
        *dst = src;
    }
    g
}

fn sgd(model: &mut ModelWeights, grads: &ModelWeights, eta: f64) -> Result<()> {
    for (w, g) in model.tensors_mut().into_iter().zip(grads.tensors()) {
        w.axpy(-eta, g)?;
    }
    Ok(())
}

fn minibatch_grads(
    model: &ModelWeights,
    data: &Dataset,
    indices: &[usize],
    epoch: usize,
    step: usize,
) -> Result<(f64, ModelWeights)> {
    let (images, labels) = data.batch(indices);
    let (loss, grads) = loss_and_gradients(model, &images, &labels)?;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { epoch, step });
    }
    Ok((loss, grads_as_model(model, grads)))
}

/// Per-epoch record of a plain training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
}

/// Plain minibatch SGD without weight decay.
pub fn train_sgd(
    model: &mut ModelWeights,
    train: &Dataset,
    val: &Dataset,
    schedule: &Schedule,
    eta: f64,
) -> Result<Vec<EpochStats>> {
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut stats = Vec::with_capacity(schedule.epochs);
    for epoch in 1..=schedule.epochs {
        let order = shuffled(train.len(), &mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(schedule.batch_size).enumerate() {
            let (loss, grads) = minibatch_grads(model, train, batch, epoch, step)?;
            sgd(model, &grads, eta)?;
            if !model.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            total += loss * batch.len() as f64;
        }
        stats.push(EpochStats {
            epoch,
            loss: total / train.len().max(1) as f64,
            val_acc: accuracy(model, val)?,
        });
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub loss: f64,
    pub masked_norm: f64,
    pub primal_residual_attn: f64,
    pub primal_residual_mlp: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PruneTrace {
    /// Masked-entry norm before the first epoch.
    pub initial_masked_norm: f64,
    pub records: Vec<TraceRecord>,
}

pub const TRACE_CSV_HEADER: &str = "epoch,loss,masked_norm,primal_residual_attn,primal_residual_mlp,val_acc";

impl PruneTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.loss, r.masked_norm, r.primal_residual_attn, r.primal_residual_mlp, r.val_acc
            );
        }
        out
    }
}

/// The soft-pruning loop: per minibatch a gradient step on the augmented
/// Lagrangian, per epoch a `Z` projection then a `U` update. Runs the
/// remaining `state.epochs − state.epoch` epochs.
pub fn run_soft_pruning(
    model: &mut ModelWeights,
    masks: &[HeadMask],
    budget: &SparsityBudget,
    state: &mut AdmmState,
    train: &Dataset,
    val: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<PruneTrace> {
    check_masks(model, masks, budget)?;
    budget.validate(&model.config)?;
    Schedule {
        epochs: state.epochs,
        batch_size,
        seed,
    }
    .validate()?;
    let keeps: Vec<Vec<bool>> = model
        .blocks
        .iter()
        .zip(masks)
        .map(|(b, m)| m.channel_mask(&b.layout.head_dims))
        .collect();
    let mut trace = PruneTrace {
        initial_masked_norm: masked_norm(model, masks),
        records: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while state.epoch < state.epochs {
        let epoch = state.epoch + 1;
        let order = shuffled(train.len(), &mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(batch_size).enumerate() {
            let (loss, grads) = minibatch_grads(model, train, batch, epoch, step)?;
            let before: Vec<(Tensor, Tensor)> = model
                .blocks
                .iter()
                .map(|b| (b.attn_group_matrix(), b.mlp_group_matrix()))
                .collect();
            // Group-matrix parameters are overwritten below; everything else
            // keeps this plain step.
            sgd(model, &grads, state.hyper.eta)?;
            for (l, (block, gblock)) in model.blocks.iter_mut().zip(&grads.blocks).enumerate() {
                let wa = update_weights_attn(
                    &before[l].0,
                    &gblock.attn_group_matrix(),
                    &keeps[l],
                    &state.z_attn[l],
                    &state.u_attn[l],
                    &state.hyper,
                )
                .map_err(|_| Error::Divergence { epoch, step })?;
                block.set_attn_group_matrix(&wa)?;
                let wm = update_weights_mlp(
                    &before[l].1,
                    &gblock.mlp_group_matrix(),
                    &state.z_mlp[l],
                    &state.u_mlp[l],
                    &state.hyper,
                )
                .map_err(|_| Error::Divergence { epoch, step })?;
                block.set_mlp_group_matrix(&wm)?;
            }
            if !model.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            total += loss * batch.len() as f64;
        }
        update_z(state, model, masks, budget)?;
        update_u(state, model)?;
        state.epoch = epoch;
        let (ra, rm) = primal_residuals(state, model)?;
        trace.records.push(TraceRecord {
            epoch,
            loss: total / train.len().max(1) as f64,
            masked_norm: masked_norm(model, masks),
            primal_residual_attn: ra,
            primal_residual_mlp: rm,
            val_acc: accuracy(model, val)?,
        });
    }
    Ok(trace)
}

/// What survived hard pruning in one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPruneReport {
    /// Original indices of the kept heads.
    pub heads: Vec<usize>,
    /// Original attention channels kept, ascending.
    pub channels: Vec<usize>,
    /// Width of each kept head after compaction.
    pub head_dims: Vec<usize>,
    /// Original MLP hidden units kept, ascending.
    pub units: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralReport {
    pub blocks: Vec<BlockPruneReport>,
    pub params_before: u64,
    pub params_after: u64,
}

/// Column norm used to rank groups at hard-prune time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupNorm {
    L1,
    L2,
}

impl GroupNorm {
    fn of(self, w: &Tensor) -> Vec<f64> {
        match self {
            GroupNorm::L1 => column_norms_l1(w),
            GroupNorm::L2 => column_norms_sq(w),
        }
    }
}

/// Chooses what to keep: the masked heads; within them the `κ_attn^c`
/// channels of largest group norm, with each kept head guaranteed its best
/// channel; the `κ_mlp^c` hidden units of largest group norm.
pub fn select_structure(
    model: &ModelWeights,
    masks: &[HeadMask],
    budget: &SparsityBudget,
) -> Result<Vec<BlockPruneReport>> {
    select_structure_by(model, masks, budget, GroupNorm::L2)
}

pub fn select_structure_by(
    model: &ModelWeights,
    masks: &[HeadMask],
    budget: &SparsityBudget,
    norm: GroupNorm,
) -> Result<Vec<BlockPruneReport>> {
    check_masks(model, masks, budget)?;
    let mut out = Vec::with_capacity(model.blocks.len());
    for (l, block) in model.blocks.iter().enumerate() {
        let b = budget.blocks[l];
        let mask = &masks[l];
        let dims = &block.layout.head_dims;
        let capacity: usize = mask.keep.iter().map(|&h| dims[h]).sum();
        if mask.keep.len() != b.kappa_attn_h || b.kappa_attn_c < b.kappa_attn_h || b.kappa_attn_c > capacity {
            return Err(Error::Contract(format!(
                "block {l}: {} kept heads of total width {capacity} cannot hold budget {b:?}",
                mask.keep.len()
            )));
        }
        if b.kappa_mlp_c > block.mlp_hidden() {
            return Err(Error::Contract(format!(
                "block {l}: MLP budget {} exceeds width {}",
                b.kappa_mlp_c,
                block.mlp_hidden()
            )));
        }
        let norms = norm.of(&block.attn_group_matrix());
        let mut chosen = vec![false; norms.len()];
        for &h in &mask.keep {
            let r = block.head_columns(h);
            let best = top_k(&norms[r.clone()], 1, |_| true);
            if let Some(&j) = best.first() {
                chosen[r.start + j] = true;
            }
        }
        let keep_flags = mask.channel_mask(dims);
        let rest = top_k(&norms, b.kappa_attn_c - mask.keep.len(), |j| {
            keep_flags[j] && !chosen[j]
        });
        for j in rest {
            chosen[j] = true;
        }
        let channels: Vec<usize> = (0..chosen.len()).filter(|&j| chosen[j]).collect();
        let head_dims = mask
            .keep
            .iter()
            .map(|&h| block.head_columns(h).filter(|&j| chosen[j]).count())
            .collect();
        let units = top_k(&norm.of(&block.mlp_group_matrix()), b.kappa_mlp_c, |_| true);
        out.push(BlockPruneReport {
            heads: mask.keep.clone(),
            channels,
            head_dims,
            units,
        });
    }
    Ok(out)
}

/// Removes every head outside the masks and every channel and MLP unit
/// outside the budgets, shrinking the tensors to exactly the budgeted sizes.
pub fn hard_prune_compact(
    model: &ModelWeights,
    masks: &[HeadMask],
    budget: &SparsityBudget,
) -> Result<(ModelWeights, StructuralReport)> {
    let blocks = select_structure(model, masks, budget)?;
    let compacted = compact_with(model, &blocks)?;
    let report = StructuralReport {
        params_before: count_params(model, None),
        params_after: count_params(&compacted, None),
        blocks,
    };
    Ok((compacted, report))
}

/// Applies a structure selection by deleting everything it does not keep.
pub fn compact_with(model: &ModelWeights, blocks: &[BlockPruneReport]) -> Result<ModelWeights> {
    let mut out = model.clone();
    for (block, r) in out.blocks.iter_mut().zip(blocks) {
        *block = block.compact(&r.channels, r.head_dims.clone(), &r.units)?;
    }
    out.validate()?;
    Ok(out)
}

/// Same selection applied by zeroing in place: the uncompacted model whose
/// logits the compacted one reproduces.
pub fn mask_with(model: &ModelWeights, blocks: &[BlockPruneReport]) -> Result<ModelWeights> {
    let mut out = model.clone();
    for (block, r) in out.blocks.iter_mut().zip(blocks) {
        let mut g = block.attn_group_matrix();
        zero_unlisted(&mut g, &r.channels);
        block.set_attn_group_matrix(&g)?;
        let mut g = block.mlp_group_matrix();
        zero_unlisted(&mut g, &r.units);
        block.set_mlp_group_matrix(&g)?;
    }
    Ok(out)
}

fn zero_unlisted(g: &mut Tensor, keep: &[usize]) {
    let cols = g.cols();
    let mut flags = vec![false; cols];
    for &k in keep {
        flags[k] = true;
    }
    for row in g.data_mut().chunks_mut(cols) {
        for (v, &f) in row.iter_mut().zip(&flags) {
            if !f {
                *v = 0.0;
            }
        }
    }
}

/// Result of fine-tuning: the best model by validation accuracy (the
/// starting point included) and the per-epoch accuracies.
#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: ModelWeights,
    pub best_val_acc: f64,
    pub start_val_acc: f64,
    pub history: Vec<EpochStats>,
}

/// Plain SGD on the compacted architecture, keeping the best checkpoint.
pub fn finetune(
    model: &ModelWeights,
    train: &Dataset,
    val: &Dataset,
    schedule: &Schedule,
    eta: f64,
) -> Result<FinetuneResult> {
    schedule.validate()?;
    let start = accuracy(model, val)?;
    let mut best = (start, model.clone());
    let mut current = model.clone();
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    for epoch in 1..=schedule.epochs {
        let order = shuffled(train.len(), &mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(schedule.batch_size).enumerate() {
            let (loss, grads) = minibatch_grads(&current, train, batch, epoch, step)?;
            sgd(&mut current, &grads, eta)?;
            if !current.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            total += loss * batch.len() as f64;
        }
        let acc = accuracy(&current, val)?;
        history.push(EpochStats {
            epoch,
            loss: total / train.len().max(1) as f64,
            val_acc: acc,
        });
        if acc > best.0 {
            best = (acc, current.clone());
        }
    }
    Ok(FinetuneResult {
        model: best.1,
        best_val_acc: best.0,
        start_val_acc: start,
        history,
    })
}
