use super::config::{VitConfig, IN_CHANNELS, LN_EPS};
use super::weights::{BlockWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, gemm_acc};
use crate::numerics::tape::assemble_tokens;
use crate::numerics::{Gradients, HeadLayout, Tape, Tensor, Var};

/// Per-head attention outputs (before the shared projection) captured during a
/// forward pass. `heads[l][h]` has `batch * tokens` rows and `head_dims[h]`
/// columns, samples stacked along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCapture {
    pub batch: usize,
    pub tokens: usize,
    pub heads: Vec<Vec<Tensor>>,
}

impl HeadCapture {
    pub fn block(&self, l: usize) -> &[Tensor] {
        &self.heads[l]
    }
}

/// Flattens `[B, 3, S, S]` images into `B·P` rows of `3·p·p` pixels; patches
/// run row-major over the image, pixels channel-major within a patch.
pub fn extract_patches(config: &VitConfig, images: &Tensor) -> Result<Tensor> {
    let s = config.image_size;
    let p = config.patch_size;
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != IN_CHANNELS || shape[2] != s || shape[3] != s {
        return Err(Error::dim(
            "extract_patches",
            format!("expected [B, {IN_CHANNELS}, {s}, {s}], got {shape:?}"),
        ));
    }
    let batch = shape[0];
    let side = s / p;
    let pd = config.patch_dim();
    let data = images.data();
    let mut out = Vec::with_capacity(batch * side * side * pd);
    for b in 0..batch {
        for py in 0..side {
            for px in 0..side {
                for c in 0..IN_CHANNELS {
                    for i in 0..p {
                        let base = ((b * IN_CHANNELS + c) * s + py * p + i) * s + px * p;
                        out.extend_from_slice(&data[base..base + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[batch * side * side, pd], out)
}

fn batch_size(images: &Tensor) -> usize {
    images.shape().first().copied().unwrap_or(0)
}

fn cls_rows(batch: usize, tokens: usize) -> Vec<usize> {
    (0..batch).map(|b| b * tokens).collect()
}

fn attention_sublayer(config: &VitConfig, block: &BlockWeights, x: &Tensor, batch: usize) -> Result<(Tensor, Tensor)> {
    let h = kernels::layer_norm(x, &block.norm1_gain, &block.norm1_bias, LN_EPS)?;
    let mut qkv = kernels::matmul(&h, &block.qkv_weight)?;
    if let Some(bias) = &block.qkv_bias {
        qkv = kernels::add_row_bias(&qkv, bias)?;
    }
    let (heads, _) =
        kernels::multi_head_attention(&qkv, batch, config.tokens(), &block.layout, config.attention_scale())?;
    let proj = kernels::add_row_bias(&kernels::matmul(&heads, &block.proj_weight)?, &block.proj_bias)?;
    Ok((heads, proj))
}

fn mlp_sublayer(block: &BlockWeights, x: &Tensor) -> Result<Tensor> {
    let h = kernels::layer_norm(x, &block.norm2_gain, &block.norm2_bias, LN_EPS)?;
    let f1 = kernels::add_row_bias(&kernels::matmul(&h, &block.fc1_weight)?, &block.fc1_bias)?;
    let a = kernels::gelu(&f1)?;
    kernels::add_row_bias(&kernels::matmul(&a, &block.fc2_weight)?, &block.fc2_bias)
}

fn split_heads(heads: &Tensor, layout: &HeadLayout) -> Vec<Tensor> {
    (0..layout.num_heads())
        .map(|h| heads.slice_cols(layout.offset(h), layout.head_dims[h]))
        .collect()
}

fn embed(model: &ModelWeights, images: &Tensor) -> Result<Tensor> {
    let patches = extract_patches(&model.config, images)?;
    let emb = kernels::add_row_bias(&kernels::matmul(&patches, &model.patch_weight)?, &model.patch_bias)?;
    assemble_tokens(&emb, &model.cls_token, &model.pos_embed, batch_size(images))
}

fn classify(model: &ModelWeights, x: &Tensor, batch: usize) -> Result<Tensor> {
    let x = kernels::layer_norm(x, &model.norm_gain, &model.norm_bias, LN_EPS)?;
    let cls = x.select_rows(&cls_rows(batch, model.config.tokens()));
    kernels::add_row_bias(&kernels::matmul(&cls, &model.head_weight)?, &model.head_bias)
}

/// Logits for a batch of `[B, 3, S, S]` images, optionally capturing every
/// head's output. Capturing never changes the logits.
pub fn forward(model: &ModelWeights, images: &Tensor, capture: bool) -> Result<(Tensor, Option<HeadCapture>)> {
    let batch = batch_size(images);
    let mut x = embed(model, images)?;
    let mut captured = capture.then(Vec::new);
    for block in &model.blocks {
        let (heads, proj) = attention_sublayer(&model.config, block, &x, batch)?;
        if let Some(c) = captured.as_mut() {
            c.push(split_heads(&heads, &block.layout));
        }
        x = x.add(&proj)?;
        let mlp = mlp_sublayer(block, &x)?;
        x = x.add(&mlp)?;
    }
    let logits = classify(model, &x, batch)?;
    let capture = captured.map(|heads| HeadCapture {
        batch,
        tokens: model.config.tokens(),
        heads,
    });
    Ok((logits, capture))
}

pub fn logits(model: &ModelWeights, images: &Tensor) -> Result<Tensor> {
    forward(model, images, false).map(|(l, _)| l)
}

/// Same network evaluated head by head: each head reads its own slice of the
/// QKV weights and accumulates its share of the projection in head order.
pub fn forward_per_head(model: &ModelWeights, images: &Tensor) -> Result<Tensor> {
    let config = &model.config;
    let batch = batch_size(images);
    let tokens = config.tokens();
    let mut x = embed(model, images)?;
    for block in &model.blocks {
        let d = block.embed_dim();
        let width = block.attn_width();
        let h = kernels::layer_norm(&x, &block.norm1_gain, &block.norm1_bias, LN_EPS)?;
        let mut proj = vec![0.0; batch * tokens * d];
        for head in 0..block.layout.num_heads() {
            let cols = block.head_columns(head);
            let dh = cols.len();
            let idx: Vec<usize> = (0..3)
                .flat_map(|part| cols.clone().map(move |c| part * width + c))
                .collect();
            let mut qkv = kernels::matmul(&h, &block.qkv_weight.select_cols(&idx))?;
            if let Some(bias) = &block.qkv_bias {
                qkv = kernels::add_row_bias(&qkv, &bias.select(&idx))?;
            }
            let single = HeadLayout::new(vec![dh]);
            let (out, _) = kernels::multi_head_attention(&qkv, batch, tokens, &single, config.attention_scale())?;
            let w = block.proj_weight.slice_rows(cols.start, dh);
            gemm_acc(&mut proj, out.data(), w.data(), batch * tokens, dh, d);
        }
        let proj = kernels::add_row_bias(&Tensor::new(&[batch * tokens, d], proj)?, &block.proj_bias)?;
        x = x.add(&proj)?;
        let mlp = mlp_sublayer(block, &x)?;
        x = x.add(&mlp)?;
    }
    classify(model, &x, batch)
}

/// Tape handles for one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub qkv_weight: Var,
    pub qkv_bias: Option<Var>,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub patch_weight: Var,
    pub patch_bias: Var,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ModelVars {
    pub fn register(tape: &mut Tape, model: &ModelWeights) -> Self {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone());
        let patch_weight = leaf(&model.patch_weight);
        let patch_bias = leaf(&model.patch_bias);
        let cls_token = leaf(&model.cls_token);
        let pos_embed = leaf(&model.pos_embed);
        let blocks = model
            .blocks
            .iter()
            .map(|b| BlockVars {
                norm1_gain: leaf(&b.norm1_gain),
                norm1_bias: leaf(&b.norm1_bias),
                qkv_weight: leaf(&b.qkv_weight),
                qkv_bias: b.qkv_bias.as_ref().map(&mut leaf),
                proj_weight: leaf(&b.proj_weight),
                proj_bias: leaf(&b.proj_bias),
                norm2_gain: leaf(&b.norm2_gain),
                norm2_bias: leaf(&b.norm2_bias),
                fc1_weight: leaf(&b.fc1_weight),
                fc1_bias: leaf(&b.fc1_bias),
                fc2_weight: leaf(&b.fc2_weight),
                fc2_bias: leaf(&b.fc2_bias),
            })
            .collect();
        ModelVars {
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            norm_gain: leaf(&model.norm_gain),
            norm_bias: leaf(&model.norm_bias),
            head_weight: leaf(&model.head_weight),
            head_bias: leaf(&model.head_bias),
        }
    }

    /// Handles in the order of [`ModelWeights::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.patch_weight, self.patch_bias, self.cls_token, self.pos_embed];
        for b in &self.blocks {
            out.extend([b.norm1_gain, b.norm1_bias, b.qkv_weight]);
            out.extend(b.qkv_bias);
            out.extend([
                b.proj_weight,
                b.proj_bias,
                b.norm2_gain,
                b.norm2_bias,
                b.fc1_weight,
                b.fc1_bias,
                b.fc2_weight,
                b.fc2_bias,
            ]);
        }
        out.extend([self.norm_gain, self.norm_bias, self.head_weight, self.head_bias]);
        out
    }
}

/// Records the forward pass on `tape` and returns the logits node.
pub fn tape_forward(tape: &mut Tape, model: &ModelWeights, vars: &ModelVars, images: &Tensor) -> Result<Var> {
    let config = &model.config;
    let batch = batch_size(images);
    let patches = tape.constant(extract_patches(config, images)?);
    let emb = tape.matmul(patches, vars.patch_weight)?;
    let emb = tape.add_row_bias(emb, vars.patch_bias)?;
    let mut x = tape.assemble_tokens(emb, vars.cls_token, vars.pos_embed, batch)?;
    for (block, bv) in model.blocks.iter().zip(&vars.blocks) {
        let h = tape.layer_norm(x, bv.norm1_gain, bv.norm1_bias, LN_EPS)?;
        let mut qkv = tape.matmul(h, bv.qkv_weight)?;
        if let Some(bias) = bv.qkv_bias {
            qkv = tape.add_row_bias(qkv, bias)?;
        }
        let heads = tape.attention(qkv, batch, config.tokens(), &block.layout, config.attention_scale())?;
        let proj = tape.matmul(heads, bv.proj_weight)?;
        let proj = tape.add_row_bias(proj, bv.proj_bias)?;
        x = tape.add(x, proj)?;
        let h = tape.layer_norm(x, bv.norm2_gain, bv.norm2_bias, LN_EPS)?;
        let f1 = tape.matmul(h, bv.fc1_weight)?;
        let f1 = tape.add_row_bias(f1, bv.fc1_bias)?;
        let a = tape.gelu(f1)?;
        let f2 = tape.matmul(a, bv.fc2_weight)?;
        let f2 = tape.add_row_bias(f2, bv.fc2_bias)?;
        x = tape.add(x, f2)?;
    }
    let x = tape.layer_norm(x, vars.norm_gain, vars.norm_bias, LN_EPS)?;
    let cls = tape.select_rows(x, cls_rows(batch, config.tokens()))?;
    let out = tape.matmul(cls, vars.head_weight)?;
    tape.add_row_bias(out, vars.head_bias)
}

/// Mean cross-entropy on a batch and its gradient for every parameter, in
/// the order of [`ModelWeights::tensors`].
pub fn loss_and_gradients(model: &ModelWeights, images: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model);
    let logits = tape_forward(&mut tape, model, &vars, images)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).data()[0];
    let mut grads: Gradients = tape.backward(loss)?;
    let out = vars
        .all()
        .into_iter()
        .map(|v| grads.take(v).expect("trainable leaf"))
        .collect();
    Ok((loss_value, out))
}

pub fn loss(model: &ModelWeights, images: &Tensor, labels: &[usize]) -> Result<f64> {
    kernels::cross_entropy_loss(&logits(model, images)?, labels)
}
