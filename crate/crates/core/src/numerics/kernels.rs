//! Pure dense kernels. Every reduction runs in a fixed index order so results
//! are bit-stable for a given input.

use super::Tensor;
use crate::error::{Error, Result};

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `out += a * b` over raw row-major buffers, accumulating over `k` in
/// ascending order for every output element.
pub(crate) fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("{m}x{k} times {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(&mut out, a.data(), b.data(), m, k, n);
    Tensor::new(&[m, n], out)?.check_finite("matmul")
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = require_matrix("matmul_tn", a)?;
    let (k2, n) = require_matrix("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", format!("({k}x{m})^T times {k2}x{n}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)?.check_finite("matmul_tn")
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul_nt", b)?;
    matmul(a, &b.transpose())
}

/// Adds `bias` to every row of `a`.
pub fn add_row_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = require_matrix("add_row_bias", a)?;
    if bias.len() != n {
        return Err(Error::dim(
            "add_row_bias",
            format!("{} columns, bias of {}", n, bias.len()),
        ));
    }
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    out.check_finite("add_row_bias")
}

pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (_, n) = require_matrix("softmax_rows", a)?;
    if !a.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-normalized activations saved for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormStats {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(a: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(a, gain, bias, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_stats(a: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, LayerNormStats)> {
    let (m, n) = require_matrix("layer_norm", a)?;
    if gain.len() != n || bias.len() != n {
        return Err(Error::dim(
            "layer_norm",
            format!("{} features, gain {} bias {}", n, gain.len(), bias.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut normalized = a.clone();
    let mut out = a.clone();
    let mut inv_std = Vec::with_capacity(m);
    let nf = n as f64;
    for (xrow, yrow) in normalized.data_mut().chunks_mut(n).zip(out.data_mut().chunks_mut(n)) {
        let mean = xrow.iter().sum::<f64>() / nf;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for (j, (x, y)) in xrow.iter_mut().zip(yrow.iter_mut()).enumerate() {
            *x = (*x - mean) * istd;
            *y = *x * gain.data()[j] + bias.data()[j];
        }
    }
    let out = out.check_finite("layer_norm")?;
    Ok((out, LayerNormStats { normalized, inv_std }))
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx of `x·Φ(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu(a: &Tensor) -> Result<Tensor> {
    a.map(gelu_scalar).check_finite("gelu")
}

/// Mean negative log-likelihood of the true class under a row softmax.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_probs(logits, labels).map(|(loss, _)| loss)
}

pub(crate) fn cross_entropy_with_probs(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = require_matrix("cross_entropy_loss", logits)?;
    if labels.len() != b {
        return Err(Error::dim(
            "cross_entropy_loss",
            format!("{} rows, {} labels", b, labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index { index: bad, bound: c });
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            op: "cross_entropy_loss",
        });
    }
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (row, &label) in probs.data_mut().chunks_mut(c).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += log_sum - (row[label] - max);
        softmax_in_place(row);
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "cross_entropy_loss",
        });
    }
    Ok((loss, probs))
}

/// Layout of the fused query/key/value activations: `[q heads | k heads | v heads]`,
/// head `h` occupying `head_dims[h]` consecutive columns inside each third.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadLayout {
    pub head_dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl HeadLayout {
    pub fn new(head_dims: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(head_dims.len());
        let mut acc = 0;
        for &d in &head_dims {
            offsets.push(acc);
            acc += d;
        }
        HeadLayout { head_dims, offsets }
    }

    pub fn uniform(heads: usize, head_dim: usize) -> Self {
        HeadLayout::new(vec![head_dim; heads])
    }

    pub fn num_heads(&self) -> usize {
        self.head_dims.len()
    }

    /// Sum of head widths; the attention output width.
    pub fn width(&self) -> usize {
        self.head_dims.iter().sum()
    }

    pub fn offset(&self, h: usize) -> usize {
        self.offsets[h]
    }
}

/// Multi-head scaled dot-product attention on a batch stacked along rows.
///
/// `qkv` has `batch * tokens` rows and `3 * layout.width()` columns. Returns the
/// concatenated per-head outputs (`batch * tokens` by `width`) and the
/// attention probabilities indexed `[b * heads + h]`.
pub fn multi_head_attention(
    qkv: &Tensor,
    batch: usize,
    tokens: usize,
    layout: &HeadLayout,
    scale: f64,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (rows, cols) = require_matrix("multi_head_attention", qkv)?;
    let width = layout.width();
    if rows != batch * tokens || cols != 3 * width {
        return Err(Error::dim(
            "multi_head_attention",
            format!("qkv {rows}x{cols} for batch {batch}, tokens {tokens}, width {width}"),
        ));
    }
    let mut out = Tensor::zeros(&[rows, width]);
    let mut probs = Vec::with_capacity(batch * layout.num_heads());
    for b in 0..batch {
        let sample = qkv.slice_rows(b * tokens, tokens);
        for (h, &dh) in layout.head_dims.iter().enumerate() {
            let off = layout.offset(h);
            let q = sample.slice_cols(off, dh);
            let k = sample.slice_cols(width + off, dh);
            let v = sample.slice_cols(2 * width + off, dh);
            let mut scores = matmul_nt(&q, &k)?;
            for s in scores.data_mut() {
                *s *= scale;
            }
            let attn = softmax_rows(&scores)?;
            let head_out = matmul(&attn, &v)?;
            for t in 0..tokens {
                out.row_mut(b * tokens + t)[off..off + dh].copy_from_slice(head_out.row(t));
            }
            probs.push(attn);
        }
    }
    Ok((out, probs))
}
