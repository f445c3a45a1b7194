//! C ABI over `hug-core`: load a checkpoint, encode queries and targets, rank a gallery.
//!
//! Every fallible function returns a [`HugStatus`]; on failure the message is
//! available from [`hug_last_error`] on the same thread. Matrices are dense
//! row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hug_core::checkpoint::{load_model, model_from_container, Container};
use hug_core::embedding::{
    holistic_distance, rank_gallery, EntryId, FineGrainedGaussian, GalleryEntry,
};
use hug_core::encoder::{encode_query, encode_target, ModelParams};
use hug_core::tensor::Tensor;
use hug_core::HugError;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HugStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Format = 4,
    Numerical = 5,
    Io = 6,
    Panic = 7,
}

/// Opaque trained model.
pub struct HugModel {
    inner: ModelParams,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HugDims {
    pub k: usize,
    pub d: usize,
    pub d_img: usize,
    pub d_txt: usize,
    /// Nonzero if the model emits variances.
    pub probabilistic: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &HugError) -> HugStatus {
    match err {
        HugError::ShapeMismatch { .. } => HugStatus::ShapeMismatch,
        HugError::Format { .. } => HugStatus::Format,
        HugError::Numerical(_) | HugError::Domain { .. } => HugStatus::Numerical,
        HugError::Io(_) => HugStatus::Io,
        HugError::Config { .. } | HugError::Invalid(_) => HugStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (HugStatus, String)>) -> HugStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HugStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HugStatus::Panic
        }
    }
}

fn core(err: HugError) -> (HugStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (HugStatus, String) {
    (HugStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(model: *const HugModel) -> Result<&'a ModelParams, (HugStatus, String)> {
    model
        .as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| null("model"))
}

unsafe fn input(
    ptr: *const f64,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<Tensor, (HugStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| (HugStatus::InvalidArgument, format!("{what}: size overflow")))?;
    Ok(Tensor::matrix(
        rows,
        cols,
        std::slice::from_raw_parts(ptr, len).to_vec(),
    ))
}

unsafe fn write_out(dst: *mut f64, src: &[f64], what: &str) -> Result<(), (HugStatus, String)> {
    if dst.is_null() {
        return Err(null(what));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

unsafe fn write_gaussians(
    gs: &[FineGrainedGaussian],
    mu_out: *mut f64,
    var_out: *mut f64,
) -> Result<(), (HugStatus, String)> {
    let mu: Vec<f64> = gs
        .iter()
        .flat_map(|g| g.mu().data().iter().copied())
        .collect();
    let var: Vec<f64> = gs
        .iter()
        .flat_map(|g| g.var().data().iter().copied())
        .collect();
    write_out(mu_out, &mu, "mu_out")?;
    write_out(var_out, &var, "var_out")
}

fn store_model(out: *mut *mut HugModel, inner: ModelParams) -> Result<(), (HugStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: `out` is non-null and points to writable storage per the contract.
    unsafe { *out = Box::into_raw(Box::new(HugModel { inner })) };
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn hug_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file. On success `*out` owns a model to be released with `hug_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hug_model_load(path: *const c_char, out: *mut *mut HugModel) -> HugStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (HugStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (model, _) = load_model(Path::new(path)).map_err(core)?;
        store_model(out, model)
    })
}

/// Loads a checkpoint from memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn hug_model_load_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut HugModel,
) -> HugStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        let c = Container::from_bytes(std::slice::from_raw_parts(bytes, len)).map_err(core)?;
        let (model, _) = model_from_container(&c).map_err(core)?;
        store_model(out, model)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from a load function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hug_model_free(model: *mut HugModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live model and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hug_model_dims(model: *const HugModel, out: *mut HugDims) -> HugStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = HugDims {
            k: m.dims.k,
            d: m.dims.d,
            d_img: m.dims.d_img,
            d_txt: m.dims.d_txt,
            probabilistic: m.variant.probabilistic() as u8,
        };
        Ok(())
    })
}

/// Encodes `n` queries. `x_r` is `n x d_img`, `x_t` is `n x d_txt`; `mu_out` and
/// `var_out` receive `n x K x D` values each.
///
/// # Safety
/// All pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn hug_encode_query(
    model: *const HugModel,
    x_r: *const f64,
    x_t: *const f64,
    n: usize,
    mu_out: *mut f64,
    var_out: *mut f64,
) -> HugStatus {
    guard(|| {
        let m = model_ref(model)?;
        let r = input(x_r, n, m.dims.d_img, "x_r")?;
        let t = input(x_t, n, m.dims.d_txt, "x_t")?;
        let gs: Vec<FineGrainedGaussian> = encode_query(m, &r, &t)
            .map_err(core)?
            .into_iter()
            .map(|(g, _)| g)
            .collect();
        write_gaussians(&gs, mu_out, var_out)
    })
}

/// Encodes `n` target images (`n x d_img`) into `n x K x D` means and variances.
///
/// # Safety
/// All pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn hug_encode_target(
    model: *const HugModel,
    x_c: *const f64,
    n: usize,
    mu_out: *mut f64,
    var_out: *mut f64,
) -> HugStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = input(x_c, n, m.dims.d_img, "x_c")?;
        let gs = encode_target(m, &c).map_err(core)?;
        write_gaussians(&gs, mu_out, var_out)
    })
}

/// Expected squared distance between two `K x D` diagonal Gaussians.
///
/// # Safety
/// The four arrays must each hold `k * d` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn hug_holistic_distance(
    mu_q: *const f64,
    var_q: *const f64,
    mu_c: *const f64,
    var_c: *const f64,
    k: usize,
    d: usize,
    out: *mut f64,
) -> HugStatus {
    guard(|| {
        let q = FineGrainedGaussian::new(input(mu_q, k, d, "mu_q")?, input(var_q, k, d, "var_q")?)
            .map_err(core)?;
        let c = FineGrainedGaussian::new(input(mu_c, k, d, "mu_c")?, input(var_c, k, d, "var_c")?)
            .map_err(core)?;
        let dist = holistic_distance(&q, &c).map_err(core)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = dist;
        Ok(())
    })
}

/// Ranks `n_gallery` images (`n_gallery x d_img`) for one query; `order_out`
/// receives gallery row indices, nearest first.
///
/// # Safety
/// All pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn hug_rank_gallery(
    model: *const HugModel,
    x_r: *const f64,
    x_t: *const f64,
    gallery: *const f64,
    n_gallery: usize,
    order_out: *mut u64,
) -> HugStatus {
    guard(|| {
        let m = model_ref(model)?;
        let r = input(x_r, 1, m.dims.d_img, "x_r")?;
        let t = input(x_t, 1, m.dims.d_txt, "x_t")?;
        let imgs = input(gallery, n_gallery, m.dims.d_img, "gallery")?;
        let (q, _) = encode_query(m, &r, &t).map_err(core)?.remove(0);
        let entries: Vec<GalleryEntry> = encode_target(m, &imgs)
            .map_err(core)?
            .into_iter()
            .enumerate()
            .map(|(i, gaussian)| GalleryEntry {
                id: EntryId(i as u64),
                gaussian,
            })
            .collect();
        let order = rank_gallery(&q, &entries).map_err(core)?;
        if order_out.is_null() {
            return Err(null("order_out"));
        }
        for (i, id) in order.iter().enumerate() {
            *order_out.add(i) = id.0;
        }
        Ok(())
    })
}
