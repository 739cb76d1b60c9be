use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::VitConfig;
use crate::error::{Error, Result};
use crate::numerics::{HeadLayout, Tensor};

/// Parameters of one transformer block.
///
/// The fused QKV matrix is `d × 3D` with columns ordered
/// `[q heads | k heads | v heads]`, and the projection is `D × d`, where
/// `D = Σ head_dims`. Head `h` owns `head_dims[h]` consecutive columns in each
/// third of `qkv_weight` and the same range of rows of `proj_weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub qkv_weight: Tensor,
    pub qkv_bias: Option<Tensor>,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
    pub layout: HeadLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: VitConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl BlockWeights {
    fn dense(config: &VitConfig, rng: Option<&mut ChaCha8Rng>) -> Self {
        let d = config.embed_dim;
        let m = config.mlp_hidden;
        let (qkv, proj, fc1, fc2) = match rng {
            Some(rng) => (
                xavier(rng, d, 3 * d),
                xavier(rng, d, d),
                xavier(rng, d, m),
                xavier(rng, m, d),
            ),
            None => (
                Tensor::zeros(&[d, 3 * d]),
                Tensor::zeros(&[d, d]),
                Tensor::zeros(&[d, m]),
                Tensor::zeros(&[m, d]),
            ),
        };
        BlockWeights {
            norm1_gain: Tensor::filled(&[d], 1.0),
            norm1_bias: Tensor::zeros(&[d]),
            qkv_weight: qkv,
            qkv_bias: config.qkv_bias.then(|| Tensor::zeros(&[3 * d])),
            proj_weight: proj,
            proj_bias: Tensor::zeros(&[d]),
            norm2_gain: Tensor::filled(&[d], 1.0),
            norm2_bias: Tensor::zeros(&[d]),
            fc1_weight: fc1,
            fc1_bias: Tensor::zeros(&[m]),
            fc2_weight: fc2,
            fc2_bias: Tensor::zeros(&[d]),
            layout: HeadLayout::uniform(config.num_heads, config.head_dim()),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.norm1_gain.len()
    }

    /// Total attention width `D`.
    pub fn attn_width(&self) -> usize {
        self.layout.width()
    }

    pub fn mlp_hidden(&self) -> usize {
        self.fc1_bias.len()
    }

    /// Rows of the attention group matrix: q, k, v weight columns, the three
    /// bias entries when present, then the transposed projection row.
    pub fn attn_group_rows(&self) -> usize {
        let d = self.embed_dim();
        4 * d + if self.qkv_bias.is_some() { 3 } else { 0 }
    }

    /// Stacks every attention parameter owned by a head channel into one
    /// column: channel `c` gathers q/k/v column `c`, its biases and row `c` of
    /// the projection. Column sparsity of this matrix is channel sparsity of
    /// the attention layer.
    pub fn attn_group_matrix(&self) -> Tensor {
        let d = self.embed_dim();
        let width = self.attn_width();
        let rows = self.attn_group_rows();
        let mut g = Tensor::zeros(&[rows, width]);
        for r in 0..d {
            let src = self.qkv_weight.row(r);
            for part in 0..3 {
                g.row_mut(part * d + r)
                    .copy_from_slice(&src[part * width..(part + 1) * width]);
            }
        }
        let mut next = 3 * d;
        if let Some(bias) = &self.qkv_bias {
            for part in 0..3 {
                g.row_mut(next + part)
                    .copy_from_slice(&bias.data()[part * width..(part + 1) * width]);
            }
            next += 3;
        }
        for c in 0..width {
            let prow = self.proj_weight.row(c);
            for (j, &v) in prow.iter().enumerate() {
                g.set(next + j, c, v);
            }
        }
        g
    }

    pub fn set_attn_group_matrix(&mut self, g: &Tensor) -> Result<()> {
        let d = self.embed_dim();
        let width = self.attn_width();
        if g.shape() != [self.attn_group_rows(), width] {
            return Err(Error::dim(
                "set_attn_group_matrix",
                format!("expected {}x{}, got {:?}", self.attn_group_rows(), width, g.shape()),
            ));
        }
        for r in 0..d {
            let dst = self.qkv_weight.row_mut(r);
            for part in 0..3 {
                dst[part * width..(part + 1) * width].copy_from_slice(g.row(part * d + r));
            }
        }
        let mut next = 3 * d;
        if let Some(bias) = &mut self.qkv_bias {
            for part in 0..3 {
                bias.data_mut()[part * width..(part + 1) * width].copy_from_slice(g.row(next + part));
            }
            next += 3;
        }
        for c in 0..width {
            let prow = self.proj_weight.row_mut(c);
            for (j, v) in prow.iter_mut().enumerate() {
                *v = g.get(next + j, c);
            }
        }
        Ok(())
    }

    /// Hidden unit `j` gathers fc1 column `j`, its bias and fc2 row `j`.
    pub fn mlp_group_matrix(&self) -> Tensor {
        let d = self.embed_dim();
        let m = self.mlp_hidden();
        let mut g = Tensor::zeros(&[2 * d + 1, m]);
        for r in 0..d {
            g.row_mut(r).copy_from_slice(self.fc1_weight.row(r));
        }
        g.row_mut(d).copy_from_slice(self.fc1_bias.data());
        for j in 0..m {
            for (k, &v) in self.fc2_weight.row(j).iter().enumerate() {
                g.set(d + 1 + k, j, v);
            }
        }
        g
    }

    pub fn set_mlp_group_matrix(&mut self, g: &Tensor) -> Result<()> {
        let d = self.embed_dim();
        let m = self.mlp_hidden();
        if g.shape() != [2 * d + 1, m] {
            return Err(Error::dim(
                "set_mlp_group_matrix",
                format!("expected {}x{}, got {:?}", 2 * d + 1, m, g.shape()),
            ));
        }
        for r in 0..d {
            self.fc1_weight.row_mut(r).copy_from_slice(g.row(r));
        }
        self.fc1_bias.data_mut().copy_from_slice(g.row(d));
        for j in 0..m {
            for (k, v) in self.fc2_weight.row_mut(j).iter_mut().enumerate() {
                *v = g.get(d + 1 + k, j);
            }
        }
        Ok(())
    }

    /// Columns of the attention group matrix owned by head `h`.
    pub fn head_columns(&self, h: usize) -> std::ops::Range<usize> {
        let off = self.layout.offset(h);
        off..off + self.layout.head_dims[h]
    }

    /// Keeps only the listed attention channels (group-matrix columns) and MLP
    /// units, shrinking every tensor that owns them. `head_dims` gives the new
    /// per-head widths, in order, and must sum to `channels.len()`.
    pub fn compact(&self, channels: &[usize], head_dims: Vec<usize>, units: &[usize]) -> Result<Self> {
        let width = self.attn_width();
        if head_dims.iter().sum::<usize>() != channels.len() {
            return Err(Error::Contract(format!(
                "head widths {:?} do not cover {} channels",
                head_dims,
                channels.len()
            )));
        }
        if let Some(&bad) = channels.iter().find(|&&c| c >= width) {
            return Err(Error::Index {
                index: bad,
                bound: width,
            });
        }
        if let Some(&bad) = units.iter().find(|&&u| u >= self.mlp_hidden()) {
            return Err(Error::Index {
                index: bad,
                bound: self.mlp_hidden(),
            });
        }
        let qkv_cols: Vec<usize> = (0..3)
            .flat_map(|part| channels.iter().map(move |&c| part * width + c))
            .collect();
        Ok(BlockWeights {
            norm1_gain: self.norm1_gain.clone(),
            norm1_bias: self.norm1_bias.clone(),
            qkv_weight: self.qkv_weight.select_cols(&qkv_cols),
            qkv_bias: self.qkv_bias.as_ref().map(|b| b.select(&qkv_cols)),
            proj_weight: self.proj_weight.select_rows(channels),
            proj_bias: self.proj_bias.clone(),
            norm2_gain: self.norm2_gain.clone(),
            norm2_bias: self.norm2_bias.clone(),
            fc1_weight: self.fc1_weight.select_cols(units),
            fc1_bias: self.fc1_bias.select(units),
            fc2_weight: self.fc2_weight.select_rows(units),
            fc2_bias: self.fc2_bias.clone(),
            layout: HeadLayout::new(head_dims),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.norm1_gain, &self.norm1_bias, &self.qkv_weight];
        if let Some(b) = &self.qkv_bias {
            out.push(b);
        }
        out.extend([
            &self.proj_weight,
            &self.proj_bias,
            &self.norm2_gain,
            &self.norm2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.norm1_gain, &mut self.norm1_bias, &mut self.qkv_weight];
        if let Some(b) = &mut self.qkv_bias {
            out.push(b);
        }
        out.extend([
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]);
        out
    }
}

impl ModelWeights {
    /// Xavier-uniform linear layers, N(0, 0.02) class token and positions,
    /// zero biases, unit norm gains.
    pub fn init(config: &VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let patch_weight = xavier(&mut rng, config.patch_dim(), d);
        let cls_token = normal(&mut rng, &[1, d], 0.02);
        let pos_embed = normal(&mut rng, &[config.tokens(), d], 0.02);
        let blocks = (0..config.num_blocks)
            .map(|_| BlockWeights::dense(config, Some(&mut rng)))
            .collect();
        let head_weight = xavier(&mut rng, d, config.num_classes);
        Ok(ModelWeights {
            config: config.clone(),
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            cls_token,
            pos_embed,
            blocks,
            norm_gain: Tensor::filled(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            head_weight,
            head_bias: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// All weights and biases zero; norm gains one.
    pub fn zeros(config: &VitConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(ModelWeights {
            config: config.clone(),
            patch_weight: Tensor::zeros(&[config.patch_dim(), d]),
            patch_bias: Tensor::zeros(&[d]),
            cls_token: Tensor::zeros(&[1, d]),
            pos_embed: Tensor::zeros(&[config.tokens(), d]),
            blocks: (0..config.num_blocks)
                .map(|_| BlockWeights::dense(config, None))
                .collect(),
            norm_gain: Tensor::filled(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            head_weight: Tensor::zeros(&[d, config.num_classes]),
            head_bias: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// Every tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.patch_weight, &self.patch_bias, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.norm_gain, &self.norm_bias, &self.head_weight, &self.head_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([
            &mut self.norm_gain,
            &mut self.norm_bias,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        out
    }

    /// Checks every tensor shape against the config and block layouts.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.embed_dim;
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::dim(
                    "ModelWeights::validate",
                    format!("{name}: expected {:?}, got {:?}", shape, t.shape()),
                ));
            }
            Ok(())
        };
        expect("patch_weight", &self.patch_weight, &[c.patch_dim(), d])?;
        expect("patch_bias", &self.patch_bias, &[d])?;
        expect("cls_token", &self.cls_token, &[1, d])?;
        expect("pos_embed", &self.pos_embed, &[c.tokens(), d])?;
        if self.blocks.len() != c.num_blocks {
            return Err(Error::dim(
                "ModelWeights::validate",
                format!("{} blocks, config says {}", self.blocks.len(), c.num_blocks),
            ));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let w = b.attn_width();
            let m = b.mlp_hidden();
            if b.layout.num_heads() > c.num_heads || b.layout.head_dims.iter().any(|&h| h > c.head_dim()) {
                return Err(Error::dim(
                    "ModelWeights::validate",
                    format!("block {l}: head widths {:?} exceed config", b.layout.head_dims),
                ));
            }
            expect("norm1_gain", &b.norm1_gain, &[d])?;
            expect("norm1_bias", &b.norm1_bias, &[d])?;
            expect("qkv_weight", &b.qkv_weight, &[d, 3 * w])?;
            match (&b.qkv_bias, c.qkv_bias) {
                (Some(bias), true) => expect("qkv_bias", bias, &[3 * w])?,
                (None, false) => {}
                _ => {
                    return Err(Error::dim(
                        "ModelWeights::validate",
                        format!("block {l}: qkv bias presence disagrees with config"),
                    ))
                }
            }
            expect("proj_weight", &b.proj_weight, &[w, d])?;
            expect("proj_bias", &b.proj_bias, &[d])?;
            expect("norm2_gain", &b.norm2_gain, &[d])?;
            expect("norm2_bias", &b.norm2_bias, &[d])?;
            expect("fc1_weight", &b.fc1_weight, &[d, m])?;
            expect("fc2_weight", &b.fc2_weight, &[m, d])?;
            expect("fc2_bias", &b.fc2_bias, &[d])?;
        }
        expect("norm_gain", &self.norm_gain, &[d])?;
        expect("norm_bias", &self.norm_bias, &[d])?;
        expect("head_weight", &self.head_weight, &[d, c.num_classes])?;
        expect("head_bias", &self.head_bias, &[c.num_classes])?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            mlp_hidden: 6,
            num_classes: 3,
            qkv_bias: true,
        }
    }

    #[test]
    fn group_matrices_round_trip() {
        let model = ModelWeights::init(&tiny(), 3).unwrap();
        let mut block = model.blocks[0].clone();
        let g = block.attn_group_matrix();
        assert_eq!(g.shape(), &[4 * 8 + 3, 8]);
        block.set_attn_group_matrix(&g.map(|v| v * 2.0)).unwrap();
        assert_eq!(block.qkv_weight, model.blocks[0].qkv_weight.map(|v| v * 2.0));
        assert_eq!(block.proj_weight, model.blocks[0].proj_weight.map(|v| v * 2.0));

        let mg = block.mlp_group_matrix();
        block.set_mlp_group_matrix(&mg.map(|v| -v)).unwrap();
        assert_eq!(block.fc2_weight, model.blocks[0].fc2_weight.map(|v| -v));
    }

    #[test]
    fn head_slices_partition_the_layer() {
        let block = &ModelWeights::init(&tiny(), 1).unwrap().blocks[0];
        let mut covered = vec![0; block.attn_width()];
        for h in 0..block.layout.num_heads() {
            for c in block.head_columns(h) {
                covered[c] += 1;
            }
        }
        assert!(covered.iter().all(|&n| n == 1));
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelWeights::init(&tiny(), 5).unwrap();
        let b = ModelWeights::init(&tiny(), 5).unwrap();
        let c = ModelWeights::init(&tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }
}
