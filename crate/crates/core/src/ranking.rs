//! Attention-head importance from a Markov chain over head similarities.
//!
//! Per block, head outputs are summed over a sampled batch and compared by
//! absolute cosine similarity. Column-normalizing the similarity matrix gives
//! a transition matrix whose stationary distribution, found by power
//! iteration from the uniform distribution, scores each head.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vit::HeadCapture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankingConfig {
    pub batch_size: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            batch_size: 64,
            tolerance: 1e-12,
            max_iterations: 100_000,
        }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("ranking batch size must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("ranking tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Column-stochastic `H × H` matrix for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub block: usize,
    pub matrix: Tensor,
    /// Heads whose batch-summed output had zero norm.
    pub degenerate: Vec<usize>,
}

impl TransitionMatrix {
    pub fn heads(&self) -> usize {
        self.matrix.rows()
    }

    /// Builds from an arbitrary nonnegative matrix by normalizing its columns.
    pub fn from_weights(block: usize, weights: Tensor) -> Result<Self> {
        let h = weights.rows();
        if weights.rank() != 2 || weights.cols() != h {
            return Err(Error::dim(
                "TransitionMatrix",
                format!("not square: {:?}", weights.shape()),
            ));
        }
        if weights.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract(
                "transition weights must be finite and nonnegative".into(),
            ));
        }
        let mut matrix = weights;
        normalize_columns(&mut matrix)?;
        Ok(TransitionMatrix {
            block,
            matrix,
            degenerate: Vec::new(),
        })
    }
}

fn normalize_columns(m: &mut Tensor) -> Result<()> {
    let h = m.rows();
    for j in 0..h {
        let s: f64 = (0..h).map(|i| m.get(i, j)).sum();
        if !(s > 0.0) {
            return Err(Error::Contract(format!("column {j} has zero mass")));
        }
        for i in 0..h {
            let v = m.get(i, j) / s;
            m.set(i, j, v);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub block: usize,
    pub scores: Vec<f64>,
    pub iterations: usize,
}

/// Keep-set of heads for one block, expandable to entry-level masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMask {
    pub block: usize,
    pub num_heads: usize,
    /// Kept head indices, ascending.
    pub keep: Vec<usize>,
}

impl HeadMask {
    pub fn all(block: usize, num_heads: usize) -> Self {
        HeadMask {
            block,
            num_heads,
            keep: (0..num_heads).collect(),
        }
    }

    pub fn keeps(&self, head: usize) -> bool {
        self.keep.binary_search(&head).is_ok()
    }

    /// One flag per attention channel (group-matrix column): set when the
    /// owning head is kept.
    pub fn channel_mask(&self, head_dims: &[usize]) -> Vec<bool> {
        head_dims
            .iter()
            .enumerate()
            .flat_map(|(h, &dh)| std::iter::repeat_n(self.keeps(h), dh))
            .collect()
    }

    /// Entry-level masks over the fused QKV (`d × 3D`) and projection
    /// (`D × d`) matrices; 1 marks entries of kept heads.
    pub fn expand(&self, embed_dim: usize, head_dims: &[usize]) -> (Tensor, Tensor) {
        let cols = self.channel_mask(head_dims);
        let width = cols.len();
        let mut qkv = Tensor::zeros(&[embed_dim, 3 * width]);
        let mut proj = Tensor::zeros(&[width, embed_dim]);
        for (c, &keep) in cols.iter().enumerate() {
            if !keep {
                continue;
            }
            for r in 0..embed_dim {
                for part in 0..3 {
                    qkv.set(r, part * width + c, 1.0);
                }
                proj.set(c, r, 1.0);
            }
        }
        (qkv, proj)
    }
}

/// Transition matrix from per-head outputs of one block: absolute cosine
/// similarity of batch-summed, flattened head outputs, columns normalized.
///
/// A head whose summed output has zero norm is similar only to itself.
pub fn build_transition_matrix(block: usize, heads: &[Tensor], batch: usize) -> Result<TransitionMatrix> {
    let h = heads.len();
    if h == 0 || batch == 0 {
        return Err(Error::Contract("need at least one head and one sample".into()));
    }
    let rows = heads[0].rows();
    if rows % batch != 0 {
        return Err(Error::dim(
            "build_transition_matrix",
            format!("{rows} rows for batch {batch}"),
        ));
    }
    let tokens = rows / batch;
    let summed: Vec<Vec<f64>> = heads
        .iter()
        .map(|t| {
            if t.rows() != rows || t.cols() != heads[0].cols() {
                return Err(Error::dim("build_transition_matrix", "head outputs differ in shape"));
            }
            let width = tokens * t.cols();
            let mut acc = vec![0.0; width];
            for sample in t.data().chunks(width) {
                for (a, v) in acc.iter_mut().zip(sample) {
                    *a += v;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let norms: Vec<f64> = summed
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let degenerate: Vec<usize> = (0..h).filter(|&i| norms[i] == 0.0).collect();
    if degenerate.len() == h {
        return Err(Error::DegenerateHeads(h));
    }
    let mut sim = Tensor::zeros(&[h, h]);
    for i in 0..h {
        for j in 0..h {
            let v = if i == j {
                1.0
            } else if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = summed[i].iter().zip(&summed[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).abs().min(1.0)
            };
            sim.set(i, j, v);
        }
    }
    normalize_columns(&mut sim)?;
    Ok(TransitionMatrix {
        block,
        matrix: sim,
        degenerate,
    })
}

/// Stationary distribution of `p` by power iteration from the uniform vector.
/// Stops once the L1 change between iterates is at most `cfg.tolerance`.
pub fn power_iteration(p: &TransitionMatrix, cfg: &RankingConfig) -> Result<ImportanceScores> {
    let h = p.heads();
    let mut s = vec![1.0 / h as f64; h];
    let mut next = vec![0.0; h];
    let mut delta = f64::INFINITY;
    for it in 1..=cfg.max_iterations {
        for (i, out) in next.iter_mut().enumerate() {
            *out = p.matrix.row(i).iter().zip(&s).map(|(a, b)| a * b).sum();
        }
        delta = next.iter().zip(&s).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut s, &mut next);
        if delta <= cfg.tolerance {
            return Ok(ImportanceScores {
                block: p.block,
                scores: s,
                iterations: it,
            });
        }
    }
    Err(Error::Convergence {
        iterations: cfg.max_iterations,
        delta,
    })
}

/// Scores for one block, with degenerate heads forced to the bottom.
pub fn rank_block(block: usize, heads: &[Tensor], batch: usize, cfg: &RankingConfig) -> Result<ImportanceScores> {
    let p = build_transition_matrix(block, heads, batch)?;
    let mut scores = power_iteration(&p, cfg)?;
    if !p.degenerate.is_empty() {
        for &d in &p.degenerate {
            scores.scores[d] = 0.0;
        }
        let total: f64 = scores.scores.iter().sum();
        for s in &mut scores.scores {
            *s /= total;
        }
    }
    Ok(scores)
}

/// Ranks every block of a capture.
pub fn rank_heads(capture: &HeadCapture, cfg: &RankingConfig) -> Result<Vec<ImportanceScores>> {
    cfg.validate()?;
    capture
        .heads
        .iter()
        .enumerate()
        .map(|(l, heads)| rank_block(l, heads, capture.batch, cfg))
        .collect()
}

/// Keeps the `kappa_h` highest-scoring heads; equal scores keep the lower index.
pub fn build_head_mask(scores: &ImportanceScores, kappa_h: usize) -> Result<HeadMask> {
    let h = scores.scores.len();
    if kappa_h == 0 || kappa_h > h {
        return Err(Error::Budget(format!("head budget {kappa_h} outside [1, {h}]")));
    }
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]).then(a.cmp(&b)));
    let mut keep = order[..kappa_h].to_vec();
    keep.sort_unstable();
    Ok(HeadMask {
        block: scores.block,
        num_heads: h,
        keep,
    })
}

/// Kendall rank correlation (tau-b) between two score vectors.
pub fn rank_stability(a: &ImportanceScores, b: &ImportanceScores) -> Result<f64> {
    kendall_tau(&a.scores, &b.scores)
}

pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("kendall_tau", format!("{} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = (a[i] - a[j]).signum() as i64 * ((a[i] != a[j]) as i64);
            let db = (b[i] - b[j]).signum() as i64 * ((b[i] != b[j]) as i64);
            match (da, db) {
                (0, 0) => {}
                (0, _) => ties_a += 1,
                (_, 0) => ties_b += 1,
                _ if da == db => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (concordant + discordant) as f64;
    let denom = ((n0 + ties_a as f64) * (n0 + ties_b as f64)).sqrt();
    if denom == 0.0 {
        // Both orderings carry no information; identical by convention.
        return Ok(if ties_a == 0 && ties_b == 0 { 1.0 } else { 0.0 });
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// One record per block: index, scores at full precision, keep-set.
pub fn export_ranking(scores: &[ImportanceScores], masks: &[HeadMask]) -> String {
    let mut out = String::new();
    for (s, m) in scores.iter().zip(masks) {
        let values: Vec<String> = s.scores.iter().map(|v| format!("{v:e}")).collect();
        let keep: Vec<String> = m.keep.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(
            out,
            "block={} scores=[{}] keep=[{}]",
            s.block,
            values.join(","),
            keep.join(",")
        );
    }
    out
}
