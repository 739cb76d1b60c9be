use std::ffi::{CStr, CString};
use std::ptr;

use vitprune_ffi::*;

fn tiny() -> VpConfig {
    VpConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        mlp_hidden: 16,
        num_classes: 3,
        qkv_bias: true,
    }
}

fn last_error() -> String {
    let p = vp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let cfg = tiny();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(vp_model_init(&cfg, 7, &mut m), VpStatus::Ok);
        assert_eq!(vp_model_save(m, path.as_ptr()), VpStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(vp_model_load(path.as_ptr(), &mut back), VpStatus::Ok);

        let images: Vec<f64> = (0..2 * 3 * 64).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut a = vec![0.0; 6];
        let mut b = vec![0.0; 6];
        assert_eq!(
            vp_model_logits(m, images.as_ptr(), images.len(), 2, a.as_mut_ptr(), 6),
            VpStatus::Ok
        );
        assert_eq!(
            vp_model_logits(back, images.as_ptr(), images.len(), 2, b.as_mut_ptr(), 6),
            VpStatus::Ok
        );
        assert_eq!(a, b);

        let mut c = VpConfig { image_size: 0, ..cfg };
        assert_eq!(vp_model_config(back, &mut c), VpStatus::Ok);
        assert_eq!(c.embed_dim, 8);
        assert!(c.qkv_bias);

        let mut params = 0u64;
        assert_eq!(vp_model_count_params(back, &mut params), VpStatus::Ok);
        assert!(params > 0);
        let mut flops = 0u64;
        assert_eq!(vp_model_count_flops(back, &mut flops), VpStatus::Ok);
        assert!(flops > 0);

        vp_model_free(m);
        vp_model_free(back);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(vp_model_init(ptr::null(), 0, &mut m), VpStatus::NullPointer);
        assert!(last_error().contains("null"));

        let bad = VpConfig { embed_dim: 7, ..tiny() };
        assert_eq!(vp_model_init(&bad, 0, &mut m), VpStatus::Config);

        let missing = CString::new("/nonexistent/dir/m.ckpt").unwrap();
        let status = vp_model_load(missing.as_ptr(), &mut m);
        assert!(matches!(status, VpStatus::Io | VpStatus::Format), "{status:?}");

        assert_eq!(vp_model_init(&tiny(), 0, &mut m), VpStatus::Ok);
        let mut out = [0.0; 3];
        let images = [0.0; 10];
        assert_eq!(
            vp_model_logits(m, images.as_ptr(), 10, 1, out.as_mut_ptr(), 3),
            VpStatus::Dimension
        );
        vp_model_free(m);
        vp_model_free(ptr::null_mut());

        // Success clears the previous message.
        let w = [1.0, 2.0];
        let mut o = [0.0; 2];
        assert_eq!(
            vp_project_column_sparse(w.as_ptr(), 1, 2, 1, o.as_mut_ptr()),
            VpStatus::Ok
        );
        assert!(vp_last_error().is_null());
        assert_eq!(
            vp_project_column_sparse(w.as_ptr(), 1, 2, 3, o.as_mut_ptr()),
            VpStatus::Budget
        );
    }
}

#[test]
fn projection_keeps_largest_columns() {
    // 2×3, column norms² 1, 25, 4.
    let w = [1.0, 3.0, 0.0, 0.0, 4.0, 2.0];
    let mut out = [9.0; 6];
    unsafe {
        assert_eq!(
            vp_project_column_sparse(w.as_ptr(), 2, 3, 2, out.as_mut_ptr()),
            VpStatus::Ok
        );
    }
    assert_eq!(out, [0.0, 3.0, 0.0, 0.0, 4.0, 2.0]);
}

#[test]
fn power_iteration_finds_stationary_vector() {
    // Doubly stochastic, so the uniform vector is stationary.
    let p = [0.5, 0.25, 0.25, 0.25, 0.5, 0.25, 0.25, 0.25, 0.5];
    let mut s = [0.0; 3];
    let mut iters = 0usize;
    unsafe {
        assert_eq!(
            vp_power_iteration(p.as_ptr(), 3, 1e-12, 1000, s.as_mut_ptr(), &mut iters),
            VpStatus::Ok
        );
    }
    for v in s {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    // Asymmetric chain: stationary vector of [[0.9, 0.2], [0.1, 0.8]] is (2/3, 1/3).
    let q = [0.9, 0.2, 0.1, 0.8];
    let mut s2 = [0.0; 2];
    unsafe {
        assert_eq!(
            vp_power_iteration(q.as_ptr(), 2, 1e-14, 10_000, s2.as_mut_ptr(), ptr::null_mut()),
            VpStatus::Ok
        );
    }
    assert!((s2[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((s2[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn kendall_and_allocation() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [4.0, 3.0, 2.0, 1.0];
    let mut tau = 0.0;
    unsafe {
        assert_eq!(vp_kendall_tau(a.as_ptr(), a.as_ptr(), 4, &mut tau), VpStatus::Ok);
        assert!((tau - 1.0).abs() < 1e-15);
        assert_eq!(vp_kendall_tau(a.as_ptr(), b.as_ptr(), 4, &mut tau), VpStatus::Ok);
        assert!((tau + 1.0).abs() < 1e-15);
    }

    let cfg = VpConfig {
        image_size: 32,
        patch_size: 4,
        embed_dim: 64,
        num_blocks: 4,
        num_heads: 4,
        mlp_hidden: 128,
        num_classes: 10,
        qkv_bias: true,
    };
    let mut budgets = [VpBlockBudget::default(); 4];
    unsafe {
        assert_eq!(vp_er_allocate(&cfg, 0.4, budgets.as_mut_ptr(), 4), VpStatus::Ok);
        assert_eq!(vp_er_allocate(&cfg, 0.4, budgets.as_mut_ptr(), 3), VpStatus::Dimension);
        let mut scratch = [VpBlockBudget::default(); 4];
        assert_eq!(vp_er_allocate(&cfg, 1.5, scratch.as_mut_ptr(), 4), VpStatus::Config);
    }
    for b in budgets {
        assert_eq!(
            b,
            VpBlockBudget {
                kappa_attn_h: 3,
                kappa_attn_c: 37,
                kappa_mlp_c: 73
            }
        );
    }
}
