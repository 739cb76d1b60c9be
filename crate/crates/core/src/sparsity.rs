//! Group-sparsity measurements, Euclidean projections onto column-sparse
//! sets, and Erdős–Rényi allocation of per-block budgets.
//!
//! Columns here are columns of the group matrices built by
//! [`BlockWeights::attn_group_matrix`] and [`BlockWeights::mlp_group_matrix`]:
//! one attention channel or one MLP hidden unit per column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vit::{count_params_for, BlockShape, BlockWeights, StructuralMask, VitConfig};

/// Squared L2 norm of every column, accumulated top to bottom.
pub fn column_norms_sq(w: &Tensor) -> Vec<f64> {
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for row in w.data().chunks(cols) {
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v * v;
        }
    }
    out
}

/// L1 norm of every column.
pub fn column_norms_l1(w: &Tensor) -> Vec<f64> {
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for row in w.data().chunks(cols) {
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v.abs();
        }
    }
    out
}

/// Number of columns holding at least one nonzero entry.
pub fn group_l0_columns(w: &Tensor) -> usize {
    let cols = w.cols();
    let mut nonzero = vec![false; cols];
    for row in w.data().chunks(cols) {
        for (flag, &v) in nonzero.iter_mut().zip(row) {
            *flag |= v != 0.0;
        }
    }
    nonzero.into_iter().filter(|&f| f).count()
}

/// Number of heads whose QKV or projection slice has a nonzero entry, given
/// the attention group matrix and its per-head widths.
pub fn group_l0_heads(attn_group: &Tensor, head_dims: &[usize]) -> Result<usize> {
    if head_dims.iter().sum::<usize>() != attn_group.cols() {
        return Err(Error::dim(
            "group_l0_heads",
            format!("head widths {:?} vs {} columns", head_dims, attn_group.cols()),
        ));
    }
    let norms = column_norms_sq(attn_group);
    let mut start = 0;
    let mut live = 0;
    for &dh in head_dims {
        if norms[start..start + dh].iter().any(|&n| n > 0.0) {
            live += 1;
        }
        start += dh;
    }
    Ok(live)
}

/// Heads of a block with any nonzero weight.
pub fn block_live_heads(block: &BlockWeights) -> usize {
    group_l0_heads(&block.attn_group_matrix(), &block.layout.head_dims).expect("consistent layout")
}

/// Indices of the `k` largest values among `eligible`, ties to the lower
/// index, returned in ascending index order.
pub fn top_k(values: &[f64], k: usize, eligible: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| eligible(i)).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Frobenius-nearest matrix with at most `kappa` nonzero columns: keeps the
/// `kappa` columns of largest L2 norm and zeroes the rest.
pub fn project_column_sparse(w: &Tensor, kappa: usize) -> Result<Tensor> {
    let cols = w.cols();
    if kappa > cols {
        return Err(Error::Budget(format!("column budget {kappa} exceeds {cols} columns")));
    }
    let keep = top_k(&column_norms_sq(w), kappa, |_| true);
    Ok(zero_columns_except(w, &keep, |_| true))
}

fn zero_columns_except(w: &Tensor, keep: &[usize], constrained: impl Fn(usize) -> bool) -> Tensor {
    let cols = w.cols();
    let mut flags = vec![false; cols];
    for &k in keep {
        flags[k] = true;
    }
    let mut out = w.clone();
    for row in out.data_mut().chunks_mut(cols) {
        for (j, v) in row.iter_mut().enumerate() {
            if constrained(j) && !flags[j] {
                *v = 0.0;
            }
        }
    }
    out
}

/// Projection onto `{Z : ‖M ⊙ Z‖₀ᶜ ≤ κ}` for an attention group matrix.
///
/// Only columns of kept heads (`channel_keep[c]`) are constrained: among them
/// the `kappa` largest survive. Columns of masked-out heads pass through
/// unchanged.
pub fn project_masked_attention(w: &Tensor, channel_keep: &[bool], kappa: usize) -> Result<Tensor> {
    if channel_keep.len() != w.cols() {
        return Err(Error::dim(
            "project_masked_attention",
            format!("{} mask flags for {} columns", channel_keep.len(), w.cols()),
        ));
    }
    let masked = channel_keep.iter().filter(|&&k| k).count();
    if kappa > masked {
        return Err(Error::Budget(format!(
            "column budget {kappa} exceeds {masked} kept-head columns"
        )));
    }
    let keep = top_k(&column_norms_sq(w), kappa, |j| channel_keep[j]);
    Ok(zero_columns_except(w, &keep, |j| channel_keep[j]))
}

/// Budgets of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockBudget {
    /// Heads to keep.
    pub kappa_attn_h: usize,
    /// Attention channels to keep, counted inside kept heads.
    pub kappa_attn_c: usize,
    /// MLP hidden units to keep.
    pub kappa_mlp_c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityBudget {
    pub ratio: f64,
    pub blocks: Vec<BlockBudget>,
}

impl SparsityBudget {
    /// No pruning at all.
    pub fn full(config: &VitConfig) -> Self {
        SparsityBudget {
            ratio: 0.0,
            blocks: vec![
                BlockBudget {
                    kappa_attn_h: config.num_heads,
                    kappa_attn_c: config.embed_dim,
                    kappa_mlp_c: config.mlp_hidden,
                };
                config.num_blocks
            ],
        }
    }

    pub fn validate(&self, config: &VitConfig) -> Result<()> {
        if self.blocks.len() != config.num_blocks {
            return Err(Error::Budget(format!(
                "{} block budgets for {} blocks",
                self.blocks.len(),
                config.num_blocks
            )));
        }
        let dh = config.head_dim();
        for (l, b) in self.blocks.iter().enumerate() {
            let bad = b.kappa_attn_h == 0
                || b.kappa_attn_h > config.num_heads
                || b.kappa_attn_c < b.kappa_attn_h
                || b.kappa_attn_c > b.kappa_attn_h * dh
                || b.kappa_mlp_c == 0
                || b.kappa_mlp_c > config.mlp_hidden;
            if bad {
                return Err(Error::Budget(format!("block {l}: inconsistent budget {b:?}")));
            }
        }
        Ok(())
    }

    /// Structure implied by the budgets, with channels spread as evenly as
    /// possible over the kept heads. Only widths matter for counting.
    pub fn structural_mask(&self) -> StructuralMask {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let base = b.kappa_attn_c / b.kappa_attn_h;
                let extra = b.kappa_attn_c % b.kappa_attn_h;
                let head_dims = (0..b.kappa_attn_h).map(|h| base + usize::from(h < extra)).collect();
                BlockShape {
                    head_dims,
                    mlp_hidden: b.kappa_mlp_c,
                }
            })
            .collect();
        StructuralMask {
            blocks,
            keep_embeddings: true,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

struct ErLayers {
    qkv: (f64, f64),
    proj: (f64, f64),
    fc1: (f64, f64),
    fc2: (f64, f64),
}

impl ErLayers {
    fn new(config: &VitConfig) -> Self {
        let d = config.embed_dim as f64;
        let m = config.mlp_hidden as f64;
        // (Erdős–Rényi raw density, weight count)
        let layer = |n_in: f64, n_out: f64| ((n_in + n_out) / (n_in * n_out), n_in * n_out);
        ErLayers {
            qkv: layer(d, 3.0 * d),
            proj: layer(d, d),
            fc1: layer(d, m),
            fc2: layer(m, d),
        }
    }

    fn densities(&self, scale: f64) -> (f64, f64) {
        let dens = |(eps, _): (f64, f64)| (scale * eps).min(1.0);
        let mix = |a: (f64, f64), b: (f64, f64)| (dens(a) * a.1 + dens(b) * b.1) / (a.1 + b.1);
        (mix(self.qkv, self.proj), mix(self.fc1, self.fc2))
    }

    fn saturating_scale(&self) -> f64 {
        [self.qkv, self.proj, self.fc1, self.fc2]
            .iter()
            .map(|(eps, _)| 1.0 / eps)
            .fold(0.0, f64::max)
    }
}

/// Erdős–Rényi allocation: per-layer density ∝ `(n_in + n_out) / (n_in · n_out)`,
/// one scale chosen by bisection so the whole model keeps
/// `(1 − ratio)` of its parameters, then rounded to integer budgets.
pub fn er_allocate(config: &VitConfig, ratio: f64) -> Result<SparsityBudget> {
    config.validate()?;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("sparsity ratio {ratio} outside (0, 1)")));
    }
    let full = StructuralMask::full(config);
    let total = count_params_for(config, &full) as f64;
    let h = config.num_heads;
    let dh = config.head_dim();
    let width = (h * dh) as f64;
    let m = config.mlp_hidden as f64;
    let d = config.embed_dim as f64;
    let attn_unit = 4.0 * d + if config.qkv_bias { 3.0 } else { 0.0 };
    let mlp_unit = 2.0 * d + 1.0;
    let blocks = config.num_blocks as f64;
    let prunable = blocks * (width * attn_unit + m * mlp_unit);
    let fixed = total - prunable;
    let target = (1.0 - ratio) * total - fixed;
    if target <= 0.0 {
        return Err(Error::Budget(format!(
            "ratio {ratio} needs fewer parameters than the unprunable {fixed}"
        )));
    }

    let layers = ErLayers::new(config);
    let kept = |scale: f64| {
        let (a, mlp) = layers.densities(scale);
        blocks * (a * width * attn_unit + mlp * m * mlp_unit)
    };
    let (mut lo, mut hi) = (0.0, layers.saturating_scale());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kept(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (attn_density, mlp_density) = layers.densities(hi);

    let channels = round_half_up(width * attn_density);
    let kappa_attn_h = round_half_up(h as f64 * attn_density)
        .max(channels.div_ceil(dh))
        .clamp(1, h);
    let kappa_attn_c = channels.clamp(kappa_attn_h, kappa_attn_h * dh);
    let kappa_mlp_c = round_half_up(m * mlp_density).clamp(1, config.mlp_hidden);
    let block = BlockBudget {
        kappa_attn_h,
        kappa_attn_c,
        kappa_mlp_c,
    };
    Ok(SparsityBudget {
        ratio,
        blocks: vec![block; config.num_blocks],
    })
}

/// Fraction of all parameters removed by a budget.
pub fn realized_sparsity(config: &VitConfig, budget: &SparsityBudget) -> f64 {
    let full = count_params_for(config, &StructuralMask::full(config)) as f64;
    let kept = count_params_for(config, &budget.structural_mask()) as f64;
    1.0 - kept / full
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l0_columns() {
        assert_eq!(group_l0_columns(&Tensor::zeros(&[3, 3])), 0);
        assert_eq!(group_l0_columns(&Tensor::identity(3)), 3);
        let mut w = Tensor::filled(&[4, 4], 1.0);
        for r in 0..4 {
            w.set(r, 0, 0.0);
            w.set(r, 2, 0.0);
        }
        assert_eq!(group_l0_columns(&w), 2);
    }

    #[test]
    fn l0_heads_either_slice_counts() {
        // 4 heads of width 1 over a 5-row group matrix.
        let mut g = Tensor::filled(&[5, 4], 1.0);
        assert_eq!(group_l0_heads(&Tensor::zeros(&[5, 4]), &[1, 1, 1, 1]).unwrap(), 0);
        for r in 0..5 {
            g.set(r, 1, 0.0);
        }
        assert_eq!(group_l0_heads(&g, &[1, 1, 1, 1]).unwrap(), 3);
        // Only the last row (a projection row) of head 1 nonzero.
        g.set(4, 1, 0.5);
        assert_eq!(group_l0_heads(&g, &[1, 1, 1, 1]).unwrap(), 4);
    }

    #[test]
    fn projection_edge_budgets() {
        let w = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.1, -0.2]).unwrap();
        assert_eq!(project_column_sparse(&w, 3).unwrap(), w);
        assert_eq!(project_column_sparse(&w, 0).unwrap(), Tensor::zeros(&[2, 3]));
        assert!(project_column_sparse(&w, 4).is_err());
    }

    #[test]
    fn projection_ties_keep_lower_index() {
        let w = Tensor::filled(&[2, 4], 1.0);
        let p = project_column_sparse(&w, 2).unwrap();
        assert_eq!(group_l0_columns(&p.slice_cols(0, 2)), 2);
        assert_eq!(group_l0_columns(&p.slice_cols(2, 2)), 0);
    }

    #[test]
    fn masked_projection_reduces_to_plain() {
        let w = Tensor::new(&[2, 4], vec![1.0, 5.0, -2.0, 0.3, 0.0, 1.0, 2.0, -4.0]).unwrap();
        assert_eq!(
            project_masked_attention(&w, &[true; 4], 2).unwrap(),
            project_column_sparse(&w, 2).unwrap()
        );
        assert_eq!(project_masked_attention(&w, &[true, true, false, false], 2).unwrap(), w);
        assert!(matches!(
            project_masked_attention(&w, &[true, true, false, false], 3),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn er_small_ratio_keeps_everything() {
        let config = VitConfig::desk();
        let b = er_allocate(&config, 1e-9).unwrap();
        assert_eq!(b.blocks, SparsityBudget::full(&config).blocks);
    }

    #[test]
    fn er_rejects_bad_ratio() {
        let config = VitConfig::desk();
        for r in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(er_allocate(&config, r), Err(Error::Config(_))));
        }
    }

    #[test]
    fn er_identical_blocks_share_budgets() {
        let b = er_allocate(&VitConfig::desk(), 0.5).unwrap();
        assert!(b.blocks.windows(2).all(|w| w[0] == w[1]));
        b.validate(&VitConfig::desk()).unwrap();
    }
}
