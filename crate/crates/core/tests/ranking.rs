use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitprune::numerics::Tensor;
use vitprune::ranking::{
    build_head_mask, build_transition_matrix, kendall_tau, power_iteration, rank_block, ImportanceScores,
    RankingConfig, TransitionMatrix,
};
use vitprune::Error;

fn random_stochastic(rng: &mut ChaCha8Rng, h: usize) -> Tensor {
    let mut t = Tensor::zeros(&[h, h]);
    for j in 0..h {
        let col: Vec<f64> = (0..h).map(|_| rng.random_range(0.01..1.0)).collect();
        let z: f64 = col.iter().sum();
        for (i, v) in col.iter().enumerate() {
            t.set(i, j, v / z);
        }
    }
    t
}

/// Null vector of `P − I` from the SVD, scaled to sum one.
fn svd_stationary(p: &Tensor) -> Vec<f64> {
    let h = p.rows();
    let m = DMatrix::from_fn(h, h, |i, j| p.get(i, j) - if i == j { 1.0 } else { 0.0 });
    let svd = m.svd(false, true);
    let vt = svd.v_t.unwrap();
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let v: Vec<f64> = vt.row(k).iter().copied().collect();
    let z: f64 = v.iter().sum();
    v.iter().map(|x| x / z).collect()
}

#[test]
fn power_iteration_matches_svd_null_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = RankingConfig::default();
    for _ in 0..50 {
        let h = rng.random_range(1..=8);
        let p = random_stochastic(&mut rng, h);
        let want = svd_stationary(&p);
        let got = power_iteration(&TransitionMatrix::from_weights(0, p).unwrap(), &cfg).unwrap();
        for (g, w) in got.scores.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
    }
}

#[test]
fn transition_matrix_is_abs_cosine_of_summed_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (batch, tokens, dh, h) = (3, 5, 4, 4);
    let heads: Vec<Tensor> = (0..h)
        .map(|_| {
            Tensor::new(
                &[batch * tokens, dh],
                (0..batch * tokens * dh).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    let p = build_transition_matrix(2, &heads, batch).unwrap();
    assert_eq!(p.block, 2);

    let summed: Vec<Vec<f64>> = heads
        .iter()
        .map(|t| {
            let mut v = vec![0.0; tokens * dh];
            for b in 0..batch {
                for r in 0..tokens {
                    for c in 0..dh {
                        v[r * dh + c] += t.get(b * tokens + r, c);
                    }
                }
            }
            v
        })
        .collect();
    let mut sim = vec![vec![0.0; h]; h];
    for i in 0..h {
        for j in 0..h {
            let dot: f64 = summed[i].iter().zip(&summed[j]).map(|(a, b)| a * b).sum();
            let ni: f64 = summed[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nj: f64 = summed[j].iter().map(|a| a * a).sum::<f64>().sqrt();
            sim[i][j] = if i == j { 1.0 } else { (dot / (ni * nj)).abs() };
        }
    }
    for j in 0..h {
        let z: f64 = (0..h).map(|i| sim[i][j]).sum();
        for i in 0..h {
            assert!((p.matrix.get(i, j) - sim[i][j] / z).abs() < 1e-14);
        }
    }
}

#[test]
fn dead_heads_score_zero_and_rank_last() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut heads: Vec<Tensor> = (0..4)
        .map(|_| Tensor::new(&[6, 2], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    heads[1] = Tensor::zeros(&[6, 2]);
    let s = rank_block(0, &heads, 2, &RankingConfig::default()).unwrap();
    assert_eq!(s.scores[1], 0.0);
    assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mask = build_head_mask(&s, 3).unwrap();
    assert_eq!(mask.keep, vec![0, 2, 3]);

    let all_dead = vec![Tensor::zeros(&[6, 2]); 3];
    assert!(matches!(
        build_transition_matrix(0, &all_dead, 2),
        Err(Error::DegenerateHeads(3))
    ));
}

#[test]
fn mask_prefers_lower_index_on_ties() {
    let s = ImportanceScores {
        block: 0,
        scores: vec![0.25, 0.25, 0.25, 0.25],
        iterations: 1,
    };
    assert_eq!(build_head_mask(&s, 2).unwrap().keep, vec![0, 1]);
    assert!(matches!(build_head_mask(&s, 0), Err(Error::Budget(_))));
    assert!(matches!(build_head_mask(&s, 5), Err(Error::Budget(_))));
}

#[test]
fn iteration_cap_reports_convergence_failure() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = TransitionMatrix::from_weights(0, random_stochastic(&mut rng, 6)).unwrap();
    let cfg = RankingConfig {
        tolerance: 0.0,
        max_iterations: 3,
        ..RankingConfig::default()
    };
    assert!(matches!(
        power_iteration(&p, &cfg),
        Err(Error::Convergence { iterations: 3, .. })
    ));
}

/// Tau-b as n₀, n₁, n₂ pair counts.
fn tau_b_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut s, mut n0, mut n1, mut n2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in 0..i {
            n0 += 1.0;
            let x = (a[i] - a[j]).partial_cmp(&0.0).unwrap() as i32 as f64;
            let y = (b[i] - b[j]).partial_cmp(&0.0).unwrap() as i32 as f64;
            s += x * y;
            if a[i] == a[j] {
                n1 += 1.0;
            }
            if b[i] == b[j] {
                n2 += 1.0;
            }
        }
    }
    s / ((n0 - n1) * (n0 - n2)).sqrt()
}

proptest! {
    #[test]
    fn kendall_matches_pair_count_oracle(
        a in proptest::collection::vec(0u8..5, 2..12),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = a.iter().map(|_| rng.random_range(0..5) as f64).collect();
        let want = tau_b_oracle(&a, &b);
        let got = kendall_tau(&a, &b).unwrap();
        if want.is_finite() {
            prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        }
        prop_assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn kendall_is_one_for_monotone_maps(v in proptest::collection::vec(-100.0f64..100.0, 2..20)) {
        let mut v = v;
        v.sort_by(f64::total_cmp);
        v.dedup();
        prop_assume!(v.len() >= 2);
        let w: Vec<f64> = v.iter().map(|x| x.powi(3) * 0.5 - 7.0).collect();
        prop_assert!((kendall_tau(&v, &w).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_vector_is_a_fixed_point(seed in 0u64..500, h in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_stochastic(&mut rng, h);
        let s = power_iteration(&TransitionMatrix::from_weights(0, p.clone()).unwrap(), &RankingConfig::default()).unwrap();
        prop_assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..h {
            let ps: f64 = (0..h).map(|j| p.get(i, j) * s.scores[j]).sum();
            prop_assert!((ps - s.scores[i]).abs() < 1e-10);
            prop_assert!(s.scores[i] > 0.0);
        }
    }
}
