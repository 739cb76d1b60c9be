//! C interface to vitprune.
//!
//! Every fallible function returns a [`VpStatus`]; on failure the message is
//! available from [`vp_last_error`] until the next call on the same thread.
//! Models are opaque [`VpModel`] handles released with [`vp_model_free`].
//! All matrices are row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use vitprune::numerics::Tensor;
use vitprune::ranking::{kendall_tau, power_iteration, RankingConfig, TransitionMatrix};
use vitprune::sparsity::{er_allocate, project_column_sparse};
use vitprune::vit::{count_flops, count_params, load_checkpoint, logits, save_checkpoint, ModelWeights, VitConfig};
use vitprune::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VpStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Format = 3,
    Io = 4,
    Budget = 5,
    Config = 6,
    Convergence = 7,
    NonFinite = 8,
    Other = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VpStatus {
    match e.root() {
        Error::Dimension { .. } | Error::Index { .. } => VpStatus::Dimension,
        Error::Format(_) | Error::Truncated(_) => VpStatus::Format,
        Error::Io(_) | Error::Data(_) => VpStatus::Io,
        Error::Budget(_) => VpStatus::Budget,
        Error::Config(_) => VpStatus::Config,
        Error::Convergence { .. } => VpStatus::Convergence,
        Error::NonFinite { .. } | Error::Divergence { .. } => VpStatus::NonFinite,
        _ => VpStatus::Other,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (VpStatus, String)>) -> VpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            VpStatus::Panic
        }
    }
}

fn lift(e: Error) -> (VpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (VpStatus, String) {
    (VpStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// call into this library on the same thread.
#[no_mangle]
pub extern "C" fn vp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Architecture description mirrored from the Rust side.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VpConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    pub qkv_bias: bool,
}

impl From<VpConfig> for VitConfig {
    fn from(c: VpConfig) -> Self {
        VitConfig {
            image_size: c.image_size,
            patch_size: c.patch_size,
            embed_dim: c.embed_dim,
            num_blocks: c.num_blocks,
            num_heads: c.num_heads,
            mlp_hidden: c.mlp_hidden,
            num_classes: c.num_classes,
            qkv_bias: c.qkv_bias,
        }
    }
}

impl From<&VitConfig> for VpConfig {
    fn from(c: &VitConfig) -> Self {
        VpConfig {
            image_size: c.image_size,
            patch_size: c.patch_size,
            embed_dim: c.embed_dim,
            num_blocks: c.num_blocks,
            num_heads: c.num_heads,
            mlp_hidden: c.mlp_hidden,
            num_classes: c.num_classes,
            qkv_bias: c.qkv_bias,
        }
    }
}

/// Budgets of one block.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VpBlockBudget {
    pub kappa_attn_h: usize,
    pub kappa_attn_c: usize,
    pub kappa_mlp_c: usize,
}

/// Opaque model handle.
pub struct VpModel {
    inner: ModelWeights,
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, (VpStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| (VpStatus::Config, "path is not UTF-8".into()))
}

unsafe fn model_ref<'a>(model: *const VpModel) -> Result<&'a ModelWeights, (VpStatus, String)> {
    model.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

/// Initializes a fresh model with seeded weights.
///
/// # Safety
/// `config` must point to a valid `VpConfig`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vp_model_init(config: *const VpConfig, seed: u64, out: *mut *mut VpModel) -> VpStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = ModelWeights::init(&VitConfig::from(*c), seed).map_err(lift)?;
        *out = Box::into_raw(Box::new(VpModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vp_model_load(path: *const c_char, out: *mut *mut VpModel) -> VpStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_checkpoint(path).map_err(lift)?;
        *out = Box::into_raw(Box::new(VpModel { inner }));
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn vp_model_save(model: *const VpModel, path: *const c_char) -> VpStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_checkpoint(m, path_arg(path)?).map_err(lift)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vp_model_free(model: *mut VpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Copies the model's architecture into `out`.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vp_model_config(model: *const VpModel, out: *mut VpConfig) -> VpStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = VpConfig::from(&m.config);
        Ok(())
    })
}

/// Total stored parameters.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vp_model_count_params(model: *const VpModel, out: *mut u64) -> VpStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = count_params(m, None);
        Ok(())
    })
}

/// Forward FLOPs per image for the model's actual (possibly compacted) shape.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vp_model_count_flops(model: *const VpModel, out: *mut u64) -> VpStatus {
    guard(|| {
        let m = model_ref(model)?;
        let mask = vitprune::vit::StructuralMask::from_model(m);
        *out.as_mut().ok_or_else(|| null("out"))? = count_flops(&m.config, Some(&mask), m.config.tokens());
        Ok(())
    })
}

/// Logits for `batch` images of `3 × S × S` values each; `out` receives
/// `batch × num_classes` values.
///
/// # Safety
/// `images` must hold `images_len` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vp_model_logits(
    model: *const VpModel,
    images: *const f64,
    images_len: usize,
    batch: usize,
    out: *mut f64,
    out_len: usize,
) -> VpStatus {
    guard(|| {
        let m = model_ref(model)?;
        if images.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let s = m.config.image_size;
        let expected_in = batch * 3 * s * s;
        let expected_out = batch * m.config.num_classes;
        if images_len != expected_in || out_len != expected_out {
            return Err((
                VpStatus::Dimension,
                format!("need {expected_in} inputs and {expected_out} outputs, got {images_len} and {out_len}"),
            ));
        }
        let data = std::slice::from_raw_parts(images, images_len).to_vec();
        let x = Tensor::new(&[batch, 3, s, s], data).map_err(lift)?;
        let y = logits(m, &x).map_err(lift)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Keeps the `kappa` columns of largest L2 norm of a `rows × cols` matrix,
/// zeroing the rest.
///
/// # Safety
/// `w` and `out` must each hold `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn vp_project_column_sparse(
    w: *const f64,
    rows: usize,
    cols: usize,
    kappa: usize,
    out: *mut f64,
) -> VpStatus {
    guard(|| {
        if w.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let n = rows * cols;
        let t = Tensor::new(&[rows, cols], std::slice::from_raw_parts(w, n).to_vec()).map_err(lift)?;
        let p = project_column_sparse(&t, kappa).map_err(lift)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(p.data());
        Ok(())
    })
}

/// Stationary distribution of an `h × h` column-stochastic matrix by power
/// iteration from the uniform vector.
///
/// # Safety
/// `p` must hold `h * h` doubles, `scores` `h` doubles; `iterations` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn vp_power_iteration(
    p: *const f64,
    h: usize,
    tolerance: f64,
    max_iterations: usize,
    scores: *mut f64,
    iterations: *mut usize,
) -> VpStatus {
    guard(|| {
        if p.is_null() || scores.is_null() {
            return Err(null("buffer"));
        }
        let t = Tensor::new(&[h, h], std::slice::from_raw_parts(p, h * h).to_vec()).map_err(lift)?;
        let tm = TransitionMatrix::from_weights(0, t).map_err(lift)?;
        let cfg = RankingConfig {
            tolerance,
            max_iterations,
            ..RankingConfig::default()
        };
        let s = power_iteration(&tm, &cfg).map_err(lift)?;
        std::slice::from_raw_parts_mut(scores, h).copy_from_slice(&s.scores);
        if let Some(it) = iterations.as_mut() {
            *it = s.iterations;
        }
        Ok(())
    })
}

/// Kendall tau-b between two score vectors of length `n`.
///
/// # Safety
/// `a` and `b` must each hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vp_kendall_tau(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> VpStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("buffer"));
        }
        let tau = kendall_tau(std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n)).map_err(lift)?;
        *out.as_mut().ok_or_else(|| null("out"))? = tau;
        Ok(())
    })
}

/// Erdős–Rényi budgets for `ratio` of the parameters removed; `out` must
/// hold `num_blocks` entries.
///
/// # Safety
/// `config` must be valid; `out` must hold `out_len` entries.
#[no_mangle]
pub unsafe extern "C" fn vp_er_allocate(
    config: *const VpConfig,
    ratio: f64,
    out: *mut VpBlockBudget,
    out_len: usize,
) -> VpStatus {
    guard(|| {
        let c = VitConfig::from(*config.as_ref().ok_or_else(|| null("config"))?);
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != c.num_blocks {
            return Err((
                VpStatus::Dimension,
                format!("{} blocks, output holds {out_len}", c.num_blocks),
            ));
        }
        let budget = er_allocate(&c, ratio).map_err(lift)?;
        let dst = std::slice::from_raw_parts_mut(out, out_len);
        for (d, b) in dst.iter_mut().zip(&budget.blocks) {
            *d = VpBlockBudget {
                kappa_attn_h: b.kappa_attn_h,
                kappa_attn_c: b.kappa_attn_c,
                kappa_mlp_c: b.kappa_mlp_c,
            };
        }
        Ok(())
    })
}
