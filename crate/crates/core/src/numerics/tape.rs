//! Reverse-mode differentiation over whole-tensor primitives.
//!
//! Operations append a node holding the forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates one adjoint per node.
//! Forward values are produced by the same kernels the inference path uses,
//! so a taped forward is bit-identical to an untaped one.

use super::kernels::{self, HeadLayout, LayerNormStats};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf {
        trainable: bool,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: LayerNormStats,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    Attention {
        qkv: Var,
        batch: usize,
        tokens: usize,
        layout: HeadLayout,
        scale: f64,
        probs: Vec<Tensor>,
    },
    AssembleTokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Sum(Var),
    HalfSquaredNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], one per trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: true })
    }

    /// Leaf that receives no adjoint (inputs, frozen tensors).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: false })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?.check_finite("add")?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = kernels::add_row_bias(self.value(a), self.value(bias))?;
        Ok(self.push(out, Op::AddRowBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c).check_finite("scale")?;
        Ok(self.push(out, Op::Scale(a, c)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, stats) = kernels::layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, stats }))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gelu(self.value(x))?;
        Ok(self.push(out, Op::Gelu(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, layout: &HeadLayout, scale: f64) -> Result<Var> {
        let (out, probs) = kernels::multi_head_attention(self.value(qkv), batch, tokens, layout, scale)?;
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                tokens,
                layout: layout.clone(),
                scale,
                probs,
            },
        ))
    }

    /// Builds the token sequence `[cls; patches] + pos` for each sample.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let out = assemble_tokens(self.value(patches), self.value(cls), self.value(pos), batch)?;
        Ok(self.push(
            out,
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let n = self.value(x).rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index { index: bad, bound: n });
        }
        let out = self.value(x).select_rows(&rows);
        Ok(self.push(out, Op::SelectRows { x, rows }))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy_with_probs(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    /// `‖x‖²_F / 2`.
    pub fn half_squared_norm(&mut self, x: Var) -> Result<Var> {
        let s = 0.5 * self.value(x).data().iter().map(|v| v * v).sum::<f64>();
        Ok(self.push(Tensor::scalar(s), Op::HalfSquaredNorm(x)))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
        }

        let grads = self
            .nodes
            .iter()
            .zip(adj)
            .map(|(node, a)| match node.op {
                Op::Leaf { trainable: true } => Some(a.unwrap_or_else(|| Tensor::zeros(node.value.shape()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let da = kernels::matmul_nt(g, self.value(*b))?;
                let db = kernels::matmul_tn(self.value(*a), g)?;
                accumulate(adj, *a, da)?;
                accumulate(adj, *b, db)?;
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone())?;
                accumulate(adj, *b, g.clone())?;
            }
            Op::AddRowBias(a, bias) => {
                let n = g.cols();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(adj, *a, g.clone())?;
                let shape = self.value(*bias).shape().to_vec();
                accumulate(adj, *bias, Tensor::new(&shape, db)?)?;
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.map(|v| v * c))?,
            Op::LayerNorm { x, gain, stats, bias } => {
                let n = g.cols();
                let nf = n as f64;
                let gain_v = self.value(*gain).data();
                let mut dx = Tensor::zeros(g.shape());
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for (r, istd) in stats.inv_std.iter().enumerate() {
                    let grow = g.row(r);
                    let xhat = stats.normalized.row(r);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let dxhat = grow[j] * gain_v[j];
                        sum_d += dxhat;
                        sum_dx += dxhat * xhat[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let out = dx.row_mut(r);
                    for j in 0..n {
                        let dxhat = grow[j] * gain_v[j];
                        out[j] = istd / nf * (nf * dxhat - sum_d - xhat[j] * sum_dx);
                    }
                }
                accumulate(adj, *x, dx)?;
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                accumulate(adj, *gain, Tensor::new(&gshape, dgain)?)?;
                accumulate(adj, *bias, Tensor::new(&bshape, dbias)?)?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *d *= kernels::gelu_grad_scalar(v);
                }
                accumulate(adj, *x, dx)?;
            }
            Op::SoftmaxRows(x) => {
                let dx = softmax_backward(&node.value, g);
                accumulate(adj, *x, dx)?;
            }
            Op::Attention {
                qkv,
                batch,
                tokens,
                layout,
                scale,
                probs,
            } => {
                let dqkv = attention_backward(self.value(*qkv), g, *batch, *tokens, layout, *scale, probs)?;
                accumulate(adj, *qkv, dqkv)?;
            }
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let d = g.cols();
                let tokens = g.rows() / batch;
                let per = tokens - 1;
                let mut dp = Tensor::zeros(self.value(*patches).shape());
                let mut dcls = vec![0.0; d];
                let mut dpos = Tensor::zeros(self.value(*pos).shape());
                for b in 0..*batch {
                    for t in 0..tokens {
                        let grow = g.row(b * tokens + t);
                        for (acc, v) in dpos.row_mut(t).iter_mut().zip(grow) {
                            *acc += v;
                        }
                        if t == 0 {
                            for (acc, v) in dcls.iter_mut().zip(grow) {
                                *acc += v;
                            }
                        } else {
                            dp.row_mut(b * per + t - 1).copy_from_slice(grow);
                        }
                    }
                }
                accumulate(adj, *patches, dp)?;
                let cshape = self.value(*cls).shape().to_vec();
                accumulate(adj, *cls, Tensor::new(&cshape, dcls)?)?;
                accumulate(adj, *pos, dpos)?;
            }
            Op::SelectRows { x, rows } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (i, &r) in rows.iter().enumerate() {
                    for (acc, v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                accumulate(adj, *x, dx)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g.data()[0] / labels.len() as f64;
                let mut dl = probs.clone();
                let c = dl.cols();
                for (r, &label) in labels.iter().enumerate() {
                    dl.data_mut()[r * c + label] -= 1.0;
                }
                for v in dl.data_mut() {
                    *v *= scale;
                }
                accumulate(adj, *logits, dl)?;
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                accumulate(adj, *x, Tensor::filled(self.value(*x).shape(), s))?;
            }
            Op::HalfSquaredNorm(x) => {
                let s = g.data()[0];
                accumulate(adj, *x, self.value(*x).map(|v| v * s))?;
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = y.cols();
    let mut dx = g.clone();
    for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
        for (d, &yv) in drow.iter_mut().zip(yrow) {
            *d = yv * (*d - dot);
        }
    }
    dx
}

fn attention_backward(
    qkv: &Tensor,
    g: &Tensor,
    batch: usize,
    tokens: usize,
    layout: &HeadLayout,
    scale: f64,
    probs: &[Tensor],
) -> Result<Tensor> {
    let width = layout.width();
    let heads = layout.num_heads();
    let mut dqkv = Tensor::zeros(qkv.shape());
    for b in 0..batch {
        let sample = qkv.slice_rows(b * tokens, tokens);
        let gsample = g.slice_rows(b * tokens, tokens);
        for (h, &dh) in layout.head_dims.iter().enumerate() {
            let off = layout.offset(h);
            let q = sample.slice_cols(off, dh);
            let k = sample.slice_cols(width + off, dh);
            let v = sample.slice_cols(2 * width + off, dh);
            let attn = &probs[b * heads + h];
            let dout = gsample.slice_cols(off, dh);

            let dattn = kernels::matmul_nt(&dout, &v)?;
            let dv = kernels::matmul_tn(attn, &dout)?;
            let mut dscores = softmax_backward(attn, &dattn);
            for s in dscores.data_mut() {
                *s *= scale;
            }
            let dq = kernels::matmul(&dscores, &k)?;
            let dk = kernels::matmul_tn(&dscores, &q)?;

            for t in 0..tokens {
                let row = dqkv.row_mut(b * tokens + t);
                row[off..off + dh].copy_from_slice(dq.row(t));
                row[width + off..width + off + dh].copy_from_slice(dk.row(t));
                row[2 * width + off..2 * width + off + dh].copy_from_slice(dv.row(t));
            }
        }
    }
    Ok(dqkv)
}

/// `[cls; patches_b] + pos` for every sample `b`, stacked along rows.
pub fn assemble_tokens(patches: &Tensor, cls: &Tensor, pos: &Tensor, batch: usize) -> Result<Tensor> {
    let d = pos.cols();
    let tokens = pos.rows();
    if batch == 0 || patches.rows() != batch * (tokens - 1) || patches.cols() != d || cls.len() != d {
        return Err(Error::dim(
            "assemble_tokens",
            format!(
                "patches {:?}, cls {:?}, pos {:?}, batch {}",
                patches.shape(),
                cls.shape(),
                pos.shape(),
                batch
            ),
        ));
    }
    let per = tokens - 1;
    let mut out = Tensor::zeros(&[batch * tokens, d]);
    for b in 0..batch {
        for t in 0..tokens {
            let src = if t == 0 {
                cls.data()
            } else {
                patches.row(b * per + t - 1)
            };
            let prow = pos.row(t);
            for ((o, s), p) in out.row_mut(b * tokens + t).iter_mut().zip(src).zip(prow) {
                *o = s + p;
            }
        }
    }
    out.check_finite("assemble_tokens")
}
