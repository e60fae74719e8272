//! C ABI over the taskvec simulator.
//!
//! Objects are opaque handles created by `tv_*_new`/`_init`/`_load` and
//! released by the matching `_free`. Every fallible call returns a
//! [`TvStatus`]; on failure `tv_last_error` gives a message for the
//! calling thread. Panics are caught at the boundary and reported as
//! `TV_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::ArrayView2;
use taskvec::experiment::{self, ExperimentConfig};
use taskvec::{checkpoint, model, ConceptBasis, Dictionary, Error, ModelParams};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionTooSmall = 3,
    DegenerateNorm = 4,
    Io = 5,
    Format = 6,
    Config = 7,
    Diverged = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

pub struct TvBasis(ConceptBasis);
pub struct TvDictionary(Dictionary);
pub struct TvParams(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TvStatus {
    match e.root() {
        Error::DimensionTooSmall { .. } => TvStatus::DimensionTooSmall,
        Error::DegenerateNorm { .. } => TvStatus::DegenerateNorm,
        Error::Io { .. } => TvStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) | Error::Csv(_) | Error::MalformedCsv(_) => TvStatus::Format,
        Error::Config { .. } | Error::Schema(_) => TvStatus::Config,
        Error::Diverged { .. } => TvStatus::Diverged,
        _ => TvStatus::InvalidArgument,
    }
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (TvStatus, String)>) -> TvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TvStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            TvStatus::Panic
        }
    }
}

fn lib(e: Error) -> (TvStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (TvStatus, String) {
    (TvStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (TvStatus, String)> {
    // SAFETY: caller passes a handle from this library or null
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (TvStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null, caller guarantees a nul-terminated string
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (TvStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), (TvStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null out pointer supplied by the caller
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), (TvStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    if len < src.len() {
        return Err((
            TvStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    // SAFETY: out has room for len >= src.len() values
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), out, src.len()) };
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn tv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Random orthonormal concept basis in R^d with `num_tasks` task/label
/// pairs and `num_common` common directions.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn tv_basis_new(
    d: usize,
    num_tasks: usize,
    num_common: usize,
    seed: u64,
    out: *mut *mut TvBasis,
) -> TvStatus {
    guard(|| {
        let b = ConceptBasis::build(d, num_tasks, num_common, seed).map_err(lib)?;
        unsafe { put(out, TvBasis(b), "out") }
    })
}

/// # Safety
/// `basis` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tv_basis_free(basis: *mut TvBasis) {
    if !basis.is_null() {
        // SAFETY: handle created by Box::into_raw in this library
        drop(unsafe { Box::from_raw(basis) });
    }
}

/// Ambient dimension, or 0 for a null handle.
///
/// # Safety
/// `basis` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tv_basis_dim(basis: *const TvBasis) -> usize {
    unsafe { basis.as_ref() }.map_or(0, |b| b.0.dim())
}

/// Copy task direction `a_k` into `out` (at least `d` values).
///
/// # Safety
/// `basis` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tv_basis_task_vector(basis: *const TvBasis, k: usize, out: *mut f64, len: usize) -> TvStatus {
    guard(|| {
        let b = unsafe { as_ref(basis, "basis") }?;
        b.0.check_task(k).map_err(lib)?;
        unsafe { copy_out(&b.0.task(k).to_vec(), out, len) }
    })
}

/// # Safety
/// `basis` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tv_basis_save(basis: *const TvBasis, path: *const c_char) -> TvStatus {
    guard(|| {
        let b = unsafe { as_ref(basis, "basis") }?;
        let p = unsafe { path_arg(path, "path") }?;
        checkpoint::save_basis(&b.0, &p).map_err(lib)
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tv_basis_load(path: *const c_char, out: *mut *mut TvBasis) -> TvStatus {
    guard(|| {
        let p = unsafe { path_arg(path, "path") }?;
        let b = checkpoint::load_basis(&p).map_err(lib)?;
        unsafe { put(out, TvBasis(b), "out") }
    })
}

/// Output dictionary over `basis` with anchor coefficient `anchor`.
///
/// # Safety
/// `basis` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tv_dictionary_new(basis: *const TvBasis, anchor: f64, out: *mut *mut TvDictionary) -> TvStatus {
    guard(|| {
        let b = unsafe { as_ref(basis, "basis") }?;
        let d = Dictionary::build(&b.0, anchor).map_err(lib)?;
        unsafe { put(out, TvDictionary(d), "out") }
    })
}

/// # Safety
/// `dict` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tv_dictionary_free(dict: *mut TvDictionary) {
    if !dict.is_null() {
        // SAFETY: handle created by Box::into_raw in this library
        drop(unsafe { Box::from_raw(dict) });
    }
}

/// Number of tokens, or 0 for a null handle.
///
/// # Safety
/// `dict` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tv_dictionary_len(dict: *const TvDictionary) -> usize {
    unsafe { dict.as_ref() }.map_or(0, |d| d.0.len())
}

/// Copy token `index` into `out` (at least `d` values).
///
/// # Safety
/// `dict` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tv_dictionary_token(dict: *const TvDictionary, index: usize, out: *mut f64, len: usize) -> TvStatus {
    guard(|| {
        let d = unsafe { as_ref(dict, "dict") }?;
        if index >= d.0.len() {
            return Err((
                TvStatus::InvalidArgument,
                format!("token {index} outside dictionary of {}", d.0.len()),
            ));
        }
        unsafe { copy_out(&d.0.token(index).to_vec(), out, len) }
    })
}

/// # Safety
/// `dict` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tv_dictionary_save(dict: *const TvDictionary, path: *const c_char) -> TvStatus {
    guard(|| {
        let d = unsafe { as_ref(dict, "dict") }?;
        let p = unsafe { path_arg(path, "path") }?;
        checkpoint::save_dictionary(&d.0, &p).map_err(lib)
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tv_dictionary_load(path: *const c_char, out: *mut *mut TvDictionary) -> TvStatus {
    guard(|| {
        let p = unsafe { path_arg(path, "path") }?;
        let d = checkpoint::load_dictionary(&p).map_err(lib)?;
        unsafe { put(out, TvDictionary(d), "out") }
    })
}

/// Initial weights: `W_K`, `W_Q` entries N(0, sigma0^2), `W_V` N(0, sigma1^2).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tv_params_init(d: usize, sigma0: f64, sigma1: f64, seed: u64, out: *mut *mut TvParams) -> TvStatus {
    guard(|| {
        let p = model::init_params(d, sigma0, sigma1, seed).map_err(lib)?;
        unsafe { put(out, TvParams(p), "out") }
    })
}

/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tv_params_free(params: *mut TvParams) {
    if !params.is_null() {
        // SAFETY: handle created by Box::into_raw in this library
        drop(unsafe { Box::from_raw(params) });
    }
}

/// Model dimension, or 0 for a null handle.
///
/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tv_params_dim(params: *const TvParams) -> usize {
    unsafe { params.as_ref() }.map_or(0, |p| p.0.dim())
}

/// # Safety
/// `params` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tv_params_save(params: *const TvParams, path: *const c_char) -> TvStatus {
    guard(|| {
        let p = unsafe { as_ref(params, "params") }?;
        let path = unsafe { path_arg(path, "path") }?;
        checkpoint::save_params(&p.0, &path).map_err(lib)
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tv_params_load(path: *const c_char, out: *mut *mut TvParams) -> TvStatus {
    guard(|| {
        let path = unsafe { path_arg(path, "path") }?;
        let p = checkpoint::load_params(&path).map_err(lib)?;
        unsafe { put(out, TvParams(p), "out") }
    })
}

/// Forward pass on `num_tokens` row-major token vectors of length `d`; the
/// last row is the query. Writes one logit per dictionary token and the
/// predicted index.
///
/// # Safety
/// `tokens` must hold `num_tokens * d` doubles, `logits` must hold
/// `logits_len` doubles, and `predicted` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tv_forward(
    params: *const TvParams,
    dict: *const TvDictionary,
    tokens: *const f64,
    num_tokens: usize,
    d: usize,
    logits: *mut f64,
    logits_len: usize,
    predicted: *mut usize,
) -> TvStatus {
    guard(|| {
        let p = unsafe { as_ref(params, "params") }?;
        let u = unsafe { as_ref(dict, "dict") }?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if predicted.is_null() {
            return Err(null("predicted"));
        }
        let n = num_tokens
            .checked_mul(d)
            .ok_or_else(|| (TvStatus::InvalidArgument, "token buffer size overflows".to_string()))?;
        // SAFETY: caller guarantees num_tokens * d readable doubles
        let data = unsafe { std::slice::from_raw_parts(tokens, n) };
        let view = ArrayView2::from_shape((num_tokens, d), data)
            .map_err(|e| (TvStatus::InvalidArgument, e.to_string()))?;
        let trace = model::forward_tokens(&p.0, view, &u.0).map_err(lib)?;
        unsafe { copy_out(trace.logits.as_slice().expect("contiguous"), logits, logits_len) }?;
        // SAFETY: checked non-null above
        unsafe { *predicted = model::predict(&trace) };
        Ok(())
    })
}

/// Run an experiment from a JSON config string into `out_dir`.
///
/// # Safety
/// Both arguments must be nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn tv_run_experiment(config_json: *const c_char, out_dir: *const c_char) -> TvStatus {
    guard(|| {
        if config_json.is_null() {
            return Err(null("config_json"));
        }
        // SAFETY: non-null nul-terminated string per the contract
        let text = unsafe { CStr::from_ptr(config_json) }
            .to_str()
            .map_err(|_| (TvStatus::InvalidArgument, "config is not UTF-8".to_string()))?;
        let dir = unsafe { path_arg(out_dir, "out_dir") }?;
        let config = ExperimentConfig::from_json(text).map_err(lib)?;
        experiment::run_config(&config, &dir).map_err(lib)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(tv_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn handle_lifecycle_and_forward() {
        unsafe {
            let mut b = ptr::null_mut();
            assert_eq!(tv_basis_new(16, 2, 4, 1, &mut b), TvStatus::Ok);
            assert_eq!(tv_basis_dim(b), 16);
            let mut u = ptr::null_mut();
            assert_eq!(tv_dictionary_new(b, 0.1, &mut u), TvStatus::Ok);
            assert_eq!(tv_dictionary_len(u), 18);
            let mut p = ptr::null_mut();
            assert_eq!(tv_params_init(16, 0.1, 0.1, 2, &mut p), TvStatus::Ok);
            assert_eq!(tv_params_dim(p), 16);

            let mut toks = vec![0.0; 3 * 16];
            for row in 0..3 {
                assert_eq!(tv_dictionary_token(u, row, toks[row * 16..].as_mut_ptr(), 16), TvStatus::Ok);
            }
            let mut logits = vec![0.0; 18];
            let mut pred = usize::MAX;
            let s = tv_forward(p, u, toks.as_ptr(), 3, 16, logits.as_mut_ptr(), 18, &mut pred);
            assert_eq!(s, TvStatus::Ok);
            let view = ArrayView2::from_shape((3, 16), &toks[..]).unwrap();
            let direct = model::forward_tokens(&(*p).0, view, &(*u).0).unwrap();
            assert_eq!(logits, direct.logits.to_vec());
            assert_eq!(pred, model::predict(&direct));

            let s = tv_forward(p, u, toks.as_ptr(), 3, 16, logits.as_mut_ptr(), 5, &mut pred);
            assert_eq!(s, TvStatus::BufferTooSmall);

            tv_params_free(p);
            tv_dictionary_free(u);
            tv_basis_free(b);
            tv_basis_free(ptr::null_mut());
        }
    }

    #[test]
    fn errors_set_status_and_message() {
        unsafe {
            let mut b = ptr::null_mut();
            assert_eq!(tv_basis_new(3, 2, 4, 1, &mut b), TvStatus::DimensionTooSmall);
            assert!(b.is_null());
            assert!(last_error().contains("dimension"));
            assert_eq!(tv_basis_new(16, 2, 4, 1, ptr::null_mut()), TvStatus::NullPointer);
            let mut out = [0.0; 4];
            assert_eq!(tv_basis_task_vector(ptr::null(), 0, out.as_mut_ptr(), 4), TvStatus::NullPointer);
            let bad = CString::new("{\"train\": {}}").unwrap();
            let dir = CString::new("/tmp/unused").unwrap();
            assert_eq!(tv_run_experiment(bad.as_ptr(), dir.as_ptr()), TvStatus::Config);
            assert!(last_error().contains("missing field"));
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("p.tvm").to_str().unwrap()).unwrap();
        unsafe {
            let mut p = ptr::null_mut();
            tv_params_init(8, 0.3, 0.3, 9, &mut p);
            assert_eq!(tv_params_save(p, path.as_ptr()), TvStatus::Ok);
            let mut q = ptr::null_mut();
            assert_eq!(tv_params_load(path.as_ptr(), &mut q), TvStatus::Ok);
            assert_eq!((*p).0, (*q).0);
            tv_params_free(p);
            tv_params_free(q);
            let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
            let mut r = ptr::null_mut();
            assert_eq!(tv_params_load(missing.as_ptr(), &mut r), TvStatus::Io);
        }
    }

    #[test]
    fn version_is_crate_version() {
        let v = unsafe { CStr::from_ptr(tv_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
