use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input images always carry three color planes.
pub const IN_CHANNELS: usize = 3;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub qkv_bias: bool,
}

fn default_true() -> bool {
    true
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig::desk()
    }
}

impl VitConfig {
    /// 32×32 images, 4-pixel patches, d=64, 4 blocks of 4 heads, MLP width 128.
    pub fn desk() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            mlp_hidden: 128,
            num_classes: 10,
            qkv_bias: true,
        }
    }

    /// The 48M-parameter ViT-Small used for CIFAR-10 (d=768, 8 blocks, 8 heads,
    /// MLP ratio 3, no QKV bias) at 224 px.
    pub fn vit_small_cifar() -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            num_blocks: 8,
            num_heads: 8,
            mlp_hidden: 2304,
            num_classes: 10,
            qkv_bias: false,
        }
    }

    pub fn deit_tiny() -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 192,
            num_blocks: 12,
            num_heads: 3,
            mlp_hidden: 768,
            num_classes: 1000,
            qkv_bias: true,
        }
    }

    pub fn deit_small() -> Self {
        VitConfig {
            embed_dim: 384,
            num_heads: 6,
            mlp_hidden: 1536,
            ..VitConfig::deit_tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        IN_CHANNELS * self.patch_size * self.patch_size
    }

    /// Softmax temperature of the attention scores; fixed by the dense head width.
    pub fn attention_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}
