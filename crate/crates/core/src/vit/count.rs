//! Parameter and FLOP accounting under structural masks.
//!
//! FLOPs count two per multiply-accumulate over patch embedding, QKV,
//! attention scores, attention-weighted values, projection, both MLP layers
//! and the classifier. Softmax, layer norms, GELU and bias additions are not
//! counted.

use serde::{Deserialize, Serialize};

use super::config::VitConfig;
use super::weights::ModelWeights;

/// Surviving widths of one block: per-head channel counts and MLP width.
/// A sublayer with nothing left is removed whole, including its norm and
/// output bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub head_dims: Vec<usize>,
    pub mlp_hidden: usize,
}

impl BlockShape {
    pub fn attn_width(&self) -> usize {
        self.head_dims.iter().sum()
    }

    pub fn live_heads(&self) -> usize {
        self.head_dims.iter().filter(|&&d| d > 0).count()
    }
}

/// Which structure of a model survives. `keep_embeddings` covers the patch
/// embedding, class token, positional embedding and final norm; the
/// classifier is always kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralMask {
    pub blocks: Vec<BlockShape>,
    pub keep_embeddings: bool,
}

impl StructuralMask {
    pub fn full(config: &VitConfig) -> Self {
        StructuralMask {
            blocks: (0..config.num_blocks)
                .map(|_| BlockShape {
                    head_dims: vec![config.head_dim(); config.num_heads],
                    mlp_hidden: config.mlp_hidden,
                })
                .collect(),
            keep_embeddings: true,
        }
    }

    /// Everything but the classifier removed.
    pub fn empty(config: &VitConfig) -> Self {
        StructuralMask {
            blocks: (0..config.num_blocks)
                .map(|_| BlockShape {
                    head_dims: vec![0; config.num_heads],
                    mlp_hidden: 0,
                })
                .collect(),
            keep_embeddings: false,
        }
    }

    /// The structure a (possibly compacted) model actually has.
    pub fn from_model(model: &ModelWeights) -> Self {
        StructuralMask {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockShape {
                    head_dims: b.layout.head_dims.clone(),
                    mlp_hidden: b.mlp_hidden(),
                })
                .collect(),
            keep_embeddings: true,
        }
    }
}

/// Parameters surviving `mask`; without a mask, the sum of all tensor sizes.
pub fn count_params(model: &ModelWeights, mask: Option<&StructuralMask>) -> u64 {
    match mask {
        Some(mask) => count_params_for(&model.config, mask),
        None => model.tensors().iter().map(|t| t.len() as u64).sum(),
    }
}

/// Closed-form parameter count of `config` under `mask`.
pub fn count_params_for(config: &VitConfig, mask: &StructuralMask) -> u64 {
    let d = config.embed_dim as u64;
    let mut total = d * config.num_classes as u64 + config.num_classes as u64;
    if mask.keep_embeddings {
        total += config.patch_dim() as u64 * d + d + d + config.tokens() as u64 * d + 2 * d;
    }
    for block in &mask.blocks {
        let w = block.attn_width() as u64;
        if w > 0 {
            let qkv_bias = if config.qkv_bias { 3 * w } else { 0 };
            total += 2 * d + d * 3 * w + qkv_bias + w * d + d;
        }
        let m = block.mlp_hidden as u64;
        if m > 0 {
            total += 2 * d + d * m + m + m * d + d;
        }
    }
    total
}

/// Forward-pass FLOPs for one image of `tokens` tokens (patches + class token).
pub fn count_flops(config: &VitConfig, mask: Option<&StructuralMask>, tokens: usize) -> u64 {
    let full;
    let mask = match mask {
        Some(m) => m,
        None => {
            full = StructuralMask::full(config);
            &full
        }
    };
    let t = tokens.max(1) as u64;
    let d = config.embed_dim as u64;
    let mut macs = d * config.num_classes as u64;
    if mask.keep_embeddings {
        macs += (t - 1) * config.patch_dim() as u64 * d;
    }
    for block in &mask.blocks {
        macs += block_macs(block, t, d);
    }
    2 * macs
}

fn block_macs(block: &BlockShape, t: u64, d: u64) -> u64 {
    let w = block.attn_width() as u64;
    let m = block.mlp_hidden as u64;
    let attn = t * d * 3 * w + 2 * t * t * w + t * w * d;
    let mlp = 2 * t * d * m;
    attn + mlp
}

/// FLOPs spent inside transformer blocks only.
pub fn count_block_flops(config: &VitConfig, mask: Option<&StructuralMask>, tokens: usize) -> u64 {
    let full;
    let mask = match mask {
        Some(m) => m,
        None => {
            full = StructuralMask::full(config);
            &full
        }
    };
    let t = tokens.max(1) as u64;
    let d = config.embed_dim as u64;
    2 * mask.blocks.iter().map(|b| block_macs(b, t, d)).sum::<u64>()
}
