//! C ABI over the adapter algebra: dense matrices, truncated SVD, the
//! update-approximation initializer, the R gradient and its closed-form
//! correction, and trainable-parameter counts.
//!
//! Every entry point returns a [`LorasbStatus`]; results come back through out
//! pointers. On failure the out pointers are left untouched and
//! [`lorasb_last_error`] describes the problem. Matrices are row-major `double`
//! arrays. Handles returned by this library are owned by the caller and must be
//! released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lorasb::init::init_lora_sb;
use lorasb::{AdapterMethod, AdapterState, Error, Matrix};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LorasbStatus {
    Ok = 0,
    NullPointer = 1,
    /// Shapes, ranks, scales or enum values out of range.
    InvalidArgument = 2,
    Singular = 3,
    NoConvergence = 4,
    NonFinite = 5,
    /// The operation does not apply to this adapter (e.g. a LoRA handle asked for R).
    WrongMethod = 6,
    /// A Rust panic was caught at the boundary; the library state is still usable.
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LorasbMethod {
    FullFt = 0,
    Lora = 1,
    LoraXs = 2,
    LoraSb = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LorasbFactor {
    B = 0,
    R = 1,
    A = 2,
}

/// Opaque dense matrix.
pub struct LorasbMatrix {
    inner: Matrix,
}

/// Opaque adapter state `W0 + s·B·R·A` (or the LoRA / full fine-tuning equivalents).
pub struct LorasbAdapter {
    inner: AdapterState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Failure(LorasbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Singular { .. } => LorasbStatus::Singular,
            Error::NoConvergence { .. } => LorasbStatus::NoConvergence,
            Error::NonFinite(_) => LorasbStatus::NonFinite,
            _ => LorasbStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LorasbStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LorasbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LorasbStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal error: {message}"));
            LorasbStatus::Internal
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

// Selectors cross the boundary as plain integers: an out-of-range value in a
// Rust enum parameter would be undefined behavior.
fn method(kind: u32) -> Result<AdapterMethod, Failure> {
    const FULL_FT: u32 = LorasbMethod::FullFt as u32;
    const LORA: u32 = LorasbMethod::Lora as u32;
    const LORA_XS: u32 = LorasbMethod::LoraXs as u32;
    const LORA_SB: u32 = LorasbMethod::LoraSb as u32;
    match kind {
        FULL_FT => Ok(AdapterMethod::FullFt),
        LORA => Ok(AdapterMethod::Lora),
        LORA_XS => Ok(AdapterMethod::LoraXs),
        LORA_SB => Ok(AdapterMethod::LoraSb),
        _ => Err(Failure(LorasbStatus::InvalidArgument, format!("unknown method {kind}"))),
    }
}

fn factor(which: u32) -> Result<LorasbFactor, Failure> {
    [LorasbFactor::B, LorasbFactor::R, LorasbFactor::A]
        .into_iter()
        .find(|f| *f as u32 == which)
        .ok_or_else(|| Failure(LorasbStatus::InvalidArgument, format!("unknown factor {which}")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lorasb_version() -> *const c_char {
    static VERSION: std::sync::OnceLock<CString> = std::sync::OnceLock::new();
    VERSION
        .get_or_init(|| CString::new(lorasb::VERSION).unwrap_or_default())
        .as_ptr()
}

/// Message for the most recent failure on this thread, or NULL if none.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lorasb_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// New `rows × cols` matrix copied from `data` (row-major, `rows·cols` values),
/// or all zeros when `data` is NULL.
///
/// # Safety
/// `data` must be NULL or point to `rows·cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasb_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut LorasbMatrix,
) -> LorasbStatus {
    guard(|| {
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(LorasbStatus::InvalidArgument, format!("{rows}x{cols} overflows")))?;
        let inner = if data.is_null() {
            Matrix::zeros(rows, cols)
        } else {
            Matrix::new(rows, cols, std::slice::from_raw_parts(data, len).to_vec())?
        };
        write_out(out, LorasbMatrix { inner }, "out")
    })
}

/// # Safety
/// `m` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lorasb_matrix_free(m: *mut LorasbMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasb_matrix_shape(m: *const LorasbMatrix, rows: *mut usize, cols: *mut usize) -> LorasbStatus {
    guard(|| {
        let m = borrow(m, "matrix")?;
        if rows.is_null() || cols.is_null() {
            return Err(null("shape out pointer"));
        }
        *rows = m.inner.rows();
        *cols = m.inner.cols();
        Ok(())
    })
}

/// Copies the row-major entries into `buf`, which holds `len` doubles.
///
/// # Safety
/// `m` must be a live handle; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lorasb_matrix_read(m: *const LorasbMatrix, buf: *mut f64, len: usize) -> LorasbStatus {
    guard(|| {
        let m = borrow(m, "matrix")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let data = m.inner.data();
        if len != data.len() {
            return Err(Failure(
                LorasbStatus::InvalidArgument,
                format!("buffer holds {len} values, matrix has {}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, len);
        Ok(())
    })
}

/// Rank-`r` truncated SVD `m ≈ U·diag(s)·Vt`. `s` receives `r` values in
/// descending order; `u` is `rows × r`, `vt` is `r × cols`.
///
/// # Safety
/// `m` must be a live handle; `s` must hold `r` doubles; `u` and `vt` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasb_truncated_svd(
    m: *const LorasbMatrix,
    r: usize,
    u: *mut *mut LorasbMatrix,
    s: *mut f64,
    vt: *mut *mut LorasbMatrix,
) -> LorasbStatus {
    guard(|| {
        let m = borrow(m, "matrix")?;
        if u.is_null() || s.is_null() || vt.is_null() {
            return Err(null("svd out pointer"));
        }
        let t = lorasb::truncated_svd(&m.inner, r)?;
        ptr::copy_nonoverlapping(t.s.as_ptr(), s, t.s.len());
        write_out(u, LorasbMatrix { inner: t.u }, "u")?;
        write_out(vt, LorasbMatrix { inner: t.vt }, "vt")
    })
}

/// Adapter of kind `kind` (a [`LorasbMethod`]) on `w0` whose initial update `s·B·R·A` is the best rank-`rank`
/// approximation of `delta` (`B`, `A` orthonormal, `R` diagonal). LoRA absorbs
/// `R` into `B`; full fine-tuning starts from a zero update.
///
/// # Safety
/// `w0` and `delta` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasb_adapter_init(
    kind: u32,
    w0: *const LorasbMatrix,
    delta: *const LorasbMatrix,
    rank: usize,
    scale: f64,
    out: *mut *mut LorasbAdapter,
) -> LorasbStatus {
    guard(|| {
        let w0 = borrow(w0, "w0")?;
        let delta = borrow(delta, "delta")?;
        if delta.inner.shape() != w0.inner.shape() {
            return Err(Failure(
                LorasbStatus::InvalidArgument,
                format!("delta {:?} does not match w0 {:?}", delta.inner.shape(), w0.inner.shape()),
            ));
        }
        let factors = init_lora_sb(&delta.inner, rank, scale)?;
        let inner = factors.into_state(method(kind)?, w0.inner.clone())?;
        write_out(out, LorasbAdapter { inner }, "out")
    })
}

/// Frozen-basis adapter `w0 + s·B·R·A` from explicit factors.
///
/// # Safety
/// All matrix arguments must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasb_adapter_from_factors(
    kind: u32,
    w0: *const LorasbMatrix,
    b: *const LorasbMatrix,
    r: *const LorasbMatrix,
    a: *const LorasbMatrix,
    scale: f64,
    out: *mut *mut LorasbAdapter,
) -> LorasbStatus {
    guard(|| {
        let (w0, b, r, a) = (borrow(w0, "w0")?, borrow(b, "b")?, borrow(r, "r")?, borrow(a, "a")?);
        let inner = AdapterState::frozen_basis(
            method(kind)?,
            w0.inner.clone(),
            b.inner.clone(),
            r.inner.clone(),
            a.inner.clone(),
            scale,
        )?;
        write_out(out, LorasbAdapter { inner }, "out")
    })
}

/// # Safety
/// `ad` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lorasb_adapter_free(ad: *mut LorasbAdapter) {
    if !ad.is_null() {
        drop(Box::from_raw(ad));
    }
}

/// Copy of the factor selected by `which` (a [`LorasbFactor`]). LoRA handles have no `R`; full fine-tuning has none of them.
///
/// # Safety
/// `ad` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasb_adapter_factor(
    ad: *const LorasbAdapter,
    which: u32,
    out: *mut *mut LorasbMatrix,
) -> LorasbStatus {
    guard(|| {
        let st = &borrow(ad, "adapter")?.inner;
        let which = factor(which)?;
        let factor = match which {
            LorasbFactor::B => st.b(),
            LorasbFactor::R => st.r(),
            LorasbFactor::A => st.a(),
        };
        let m = factor.ok_or_else(|| {
            Failure(LorasbStatus::WrongMethod, format!("{} adapter has no {which:?} factor", st.method()))
        })?;
        write_out(out, LorasbMatrix { inner: m.clone() }, "out")
    })
}

/// Replaces the trainable `R` of a frozen-basis adapter.
///
/// # Safety
/// `ad` and `r` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn lorasb_adapter_set_r(ad: *mut LorasbAdapter, r: *const LorasbMatrix) -> LorasbStatus {
    guard(|| {
        let st = &mut ad.as_mut().ok_or_else(|| null("adapter"))?.inner;
        let r = borrow(r, "r")?;
        if !st.method().has_frozen_basis() {
            return Err(Failure(LorasbStatus::WrongMethod, format!("{} adapter has no R", st.method())));
        }
        Ok(st.set_r(r.inner.clone())?)
    })
}

/// `W0 + ΔW`.
///
/// # Safety
/// `ad` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasb_adapter_effective_weight(ad: *const LorasbAdapter, out: *mut *mut LorasbMatrix) -> LorasbStatus {
    guard(|| {
        let st = &borrow(ad, "adapter")?.inner;
        let inner = lorasb::effective_weight(st)?;
        write_out(out, LorasbMatrix { inner }, "out")
    })
}

fn frozen(st: &AdapterState) -> Result<(), Failure> {
    if st.method().has_frozen_basis() {
        Ok(())
    } else {
        Err(Failure(LorasbStatus::WrongMethod, format!("{} adapter has no frozen basis", st.method())))
    }
}

/// Raw R gradient `s·Bᵀ·g·Aᵀ` from the full-weight gradient `g`.
///
/// # Safety
/// `ad` and `g` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasb_xs_gradient(
    ad: *const LorasbAdapter,
    g: *const LorasbMatrix,
    out: *mut *mut LorasbMatrix,
) -> LorasbStatus {
    guard(|| {
        let st = &borrow(ad, "adapter")?.inner;
        frozen(st)?;
        let inner = lorasb::xs_gradient(st, &borrow(g, "g")?.inner)?;
        write_out(out, LorasbMatrix { inner }, "out")
    })
}

/// Corrected R gradient `(1/s²)·(BᵀB)⁻¹·g_R·(AAᵀ)⁻¹`, whose equivalent
/// full-weight gradient is the closest one to `g` the basis can express.
///
/// # Safety
/// `ad` and `g_r` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasb_optimal_correction(
    ad: *const LorasbAdapter,
    g_r: *const LorasbMatrix,
    out: *mut *mut LorasbMatrix,
) -> LorasbStatus {
    guard(|| {
        let st = &borrow(ad, "adapter")?.inner;
        frozen(st)?;
        let inner = lorasb::optimal_correction(st, &borrow(g_r, "g_r")?.inner)?;
        write_out(out, LorasbMatrix { inner }, "out")
    })
}

/// Full-weight gradient `s·B·g_R·A` equivalent to an R gradient.
///
/// # Safety
/// `ad` and `g_r` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasb_equivalent_gradient(
    ad: *const LorasbAdapter,
    g_r: *const LorasbMatrix,
    out: *mut *mut LorasbMatrix,
) -> LorasbStatus {
    guard(|| {
        let st = &borrow(ad, "adapter")?.inner;
        frozen(st)?;
        let inner = lorasb::equivalent_gradient(st, &borrow(g_r, "g_r")?.inner)?;
        write_out(out, LorasbMatrix { inner }, "out")
    })
}

/// Trainable parameters of `kind` (a [`LorasbMethod`]) at `rank` summed over `count` weight shapes,
/// given as `(rows, cols)` pairs in `shapes[2·count]`.
///
/// # Safety
/// `shapes` must point to `2·count` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lorasb_param_count(
    kind: u32,
    shapes: *const usize,
    count: usize,
    rank: usize,
    out: *mut u64,
) -> LorasbStatus {
    guard(|| {
        if shapes.is_null() && count > 0 {
            return Err(null("shapes"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let flat = if count == 0 { &[][..] } else { std::slice::from_raw_parts(shapes, 2 * count) };
        let pairs: Vec<(usize, usize)> = flat.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        *out = lorasb::param_count(method(kind)?, &pairs, rank)?;
        Ok(())
    })
}
