//! The transformer against a straight-line reference and its own invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitprune::numerics::Tensor;
use vitprune::vit::checkpoint::{read_checkpoint, write_checkpoint};
use vitprune::vit::{
    count_flops, count_params, forward, forward_per_head, logits, loss, loss_and_gradients, ModelWeights,
    StructuralMask, VitConfig,
};
use vitprune::Error;

fn tiny(qkv_bias: bool) -> VitConfig {
    VitConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 12,
        num_blocks: 2,
        num_heads: 3,
        mlp_hidden: 10,
        num_classes: 4,
        qkv_bias,
    }
}

/// Init plus random noise on every tensor so biases and gains matter.
fn perturbed(config: &VitConfig, seed: u64) -> ModelWeights {
    let mut m = ModelWeights::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for t in m.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

fn images(config: &VitConfig, batch: usize, seed: u64) -> Tensor {
    let s = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        &[batch, 3, s, s],
        (0..batch * 3 * s * s).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: &mut Mat, b: &[f64]) {
    for row in a {
        for (x, y) in row.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn ln(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

// Maclaurin series; fine for the |x| < 5 seen here.
fn erf_series(x: f64) -> f64 {
    if x.abs() > 5.0 {
        return x.signum();
    }
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-22 * sum.abs().max(1e-300) {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
        if n > 200.0 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// One image at a time, token by token, head by head.
fn reference_logits(m: &ModelWeights, img: &[f64]) -> Vec<f64> {
    let c = &m.config;
    let (s, p) = (c.image_size, c.patch_size);
    let side = s / p;
    let mut patches = Vec::new();
    for py in 0..side {
        for px in 0..side {
            let mut v = Vec::new();
            for ch in 0..3 {
                for i in 0..p {
                    for j in 0..p {
                        v.push(img[(ch * s + py * p + i) * s + px * p + j]);
                    }
                }
            }
            patches.push(v);
        }
    }
    let mut emb = mm(&patches, &mat(&m.patch_weight));
    add_bias(&mut emb, m.patch_bias.data());
    let mut x: Mat = vec![m.cls_token.data().to_vec()];
    x.extend(emb);
    for (t, row) in x.iter_mut().enumerate() {
        for (v, e) in row.iter_mut().zip(m.pos_embed.row(t)) {
            *v += e;
        }
    }
    let n = x.len();
    for blk in &m.blocks {
        let h = ln(&x, blk.norm1_gain.data(), blk.norm1_bias.data());
        let mut qkv = mm(&h, &mat(&blk.qkv_weight));
        if let Some(b) = &blk.qkv_bias {
            add_bias(&mut qkv, b.data());
        }
        let width = blk.proj_weight.rows();
        let mut heads_out = vec![vec![0.0; width]; n];
        let dh_dense = c.embed_dim / c.num_heads;
        for hd in 0..blk.layout.num_heads() {
            let off = blk.layout.offset(hd);
            let dh = blk.layout.head_dims[hd];
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh).map(|k| qkv[i][off + k] * qkv[j][width + off + k]).sum::<f64>()
                            / (dh_dense as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..dh {
                    heads_out[i][off + k] = (0..n).map(|j| e[j] / z * qkv[j][2 * width + off + k]).sum();
                }
            }
        }
        let mut proj = mm(&heads_out, &mat(&blk.proj_weight));
        add_bias(&mut proj, blk.proj_bias.data());
        for (xr, pr) in x.iter_mut().zip(&proj) {
            for (a, b) in xr.iter_mut().zip(pr) {
                *a += b;
            }
        }
        let h = ln(&x, blk.norm2_gain.data(), blk.norm2_bias.data());
        let mut f = mm(&h, &mat(&blk.fc1_weight));
        add_bias(&mut f, blk.fc1_bias.data());
        for row in f.iter_mut() {
            for v in row.iter_mut() {
                *v = gelu(*v);
            }
        }
        let mut o = mm(&f, &mat(&blk.fc2_weight));
        add_bias(&mut o, blk.fc2_bias.data());
        for (xr, orow) in x.iter_mut().zip(&o) {
            for (a, b) in xr.iter_mut().zip(orow) {
                *a += b;
            }
        }
    }
    let cls = ln(&x[..1].to_vec(), m.norm_gain.data(), m.norm_bias.data());
    let mut out = mm(&cls, &mat(&m.head_weight));
    add_bias(&mut out, m.head_bias.data());
    out.remove(0)
}

#[test]
fn logits_match_straight_line_reference() {
    for bias in [true, false] {
        let config = tiny(bias);
        let m = perturbed(&config, 3);
        let x = images(&config, 3, 9);
        let got = logits(&m, &x).unwrap();
        let per = 3 * 64;
        for b in 0..3 {
            let want = reference_logits(&m, &x.data()[b * per..(b + 1) * per]);
            for (g, w) in got.row(b).iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "{g} vs {w}");
            }
        }
    }
}

#[test]
fn per_head_evaluation_and_capture_agree() {
    let config = tiny(true);
    let m = perturbed(&config, 4);
    let x = images(&config, 2, 1);
    let (a, cap) = forward(&m, &x, true).unwrap();
    let b = logits(&m, &x).unwrap();
    assert_eq!(a, b);
    let c = forward_per_head(&m, &x).unwrap();
    for (u, v) in a.data().iter().zip(c.data()) {
        assert!((u - v).abs() < 1e-12);
    }
    let cap = cap.unwrap();
    assert_eq!(cap.heads.len(), 2);
    assert_eq!(cap.block(0).len(), 3);
    assert_eq!(cap.block(0)[0].shape(), &[2 * config.tokens(), 4]);
}

#[test]
fn gradients_match_finite_differences_on_every_tensor() {
    let config = tiny(true);
    let m = perturbed(&config, 5);
    let x = images(&config, 2, 2);
    let labels = [1, 3];
    let (l, grads) = loss_and_gradients(&m, &x, &labels).unwrap();
    assert!((l - loss(&m, &x, &labels).unwrap()).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    for (ti, g) in grads.iter().enumerate() {
        assert_eq!(g.shape(), m.tensors()[ti].shape());
        for _ in 0..3 {
            let i = rng.random_range(0..g.len());
            let mut p = m.clone();
            p.tensors_mut()[ti].data_mut()[i] += h;
            let mut q = m.clone();
            q.tensors_mut()[ti].data_mut()[i] -= h;
            let fd = (loss(&p, &x, &labels).unwrap() - loss(&q, &x, &labels).unwrap()) / (2.0 * h);
            let an = g.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(
                rel < 1e-4 || (fd - an).abs() < 1e-9,
                "tensor {ti} coord {i}: fd {fd}, tape {an}"
            );
        }
    }
}

#[test]
fn parameter_count_is_total_tensor_size() {
    for bias in [true, false] {
        let config = tiny(bias);
        let m = ModelWeights::init(&config, 0).unwrap();
        let total: usize = m.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(count_params(&m, None), total as u64);
        assert_eq!(count_params(&m, Some(&StructuralMask::full(&config))), total as u64);
    }
    let c = tiny(true);
    assert!(count_flops(&c, None, c.tokens()) > 0);
}

#[test]
fn known_architectures_count_as_published() {
    let small = ModelWeights::zeros(&VitConfig::vit_small_cifar()).unwrap();
    assert_eq!(count_params(&small, None), 47_993_098);
    let tiny = ModelWeights::zeros(&VitConfig::deit_tiny()).unwrap();
    assert_eq!(count_params(&tiny, None), 5_717_416);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let config = tiny(false);
    let m = perturbed(&config, 8);
    let mut bytes = Vec::new();
    write_checkpoint(&m, &mut bytes).unwrap();
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, m);

    // Compacted model survives too.
    let c = m.blocks[0].compact(&[0, 1, 4, 5, 6], vec![2, 3], &[0, 3, 9]).unwrap();
    let mut mc = m.clone();
    mc.blocks[0] = c;
    let mut bytes = Vec::new();
    write_checkpoint(&mc, &mut bytes).unwrap();
    assert_eq!(read_checkpoint(&bytes).unwrap(), mc);

    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(
            read_checkpoint(&bytes[..cut]),
            Err(Error::Truncated(_) | Error::Format(_))
        ));
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xFF;
    assert!(matches!(read_checkpoint(&bad), Err(Error::Format(_))));
}

#[test]
fn init_is_deterministic_in_the_seed() {
    let c = tiny(true);
    assert_eq!(ModelWeights::init(&c, 11).unwrap(), ModelWeights::init(&c, 11).unwrap());
    assert_ne!(ModelWeights::init(&c, 11).unwrap(), ModelWeights::init(&c, 12).unwrap());
}

#[test]
fn wrong_image_shape_is_a_dimension_error() {
    let c = tiny(true);
    let m = ModelWeights::init(&c, 0).unwrap();
    let x = Tensor::zeros(&[1, 3, 9, 9]);
    assert!(matches!(logits(&m, &x), Err(Error::Dimension { .. })));
}
