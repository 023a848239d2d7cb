//! C ABI over `headsim`.
//!
//! Models and score tables are opaque handles released with their `_free`
//! function. Every fallible call returns an `HsStatus`; on failure the message
//! is available from `hs_last_error_message` on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use headsim::rand_baseline::tight_reference;
use headsim::similarity::score_all_pairs;
use headsim::subspace::{orthonormalize, projection_kernel};
use headsim::{load_bundle, Error, ErrorCategory, Metric, ModelWeights, PairMode, PairingType, SimilarityTable};
use nalgebra::DMatrix;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Bundle = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsMetric {
    Pk = 0,
    Cs = 1,
    SimpleCs = 2,
    LinearCka = 3,
    Procrustes = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsPairMode {
    StrictEarlier = 0,
    SameType = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HsModelConfig {
    pub d_model: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HsPairScore {
    pub src_layer: usize,
    pub src_head: usize,
    pub dst_layer: usize,
    pub dst_head: usize,
    pub score: f64,
}

/// Loaded model weights.
pub struct HsModel {
    weights: ModelWeights,
}

/// Scores for every pair of one pairing.
pub struct HsTable {
    table: SimilarityTable,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HsStatus {
    match e.category() {
        ErrorCategory::Usage => HsStatus::InvalidArgument,
        ErrorCategory::Bundle => HsStatus::Bundle,
        ErrorCategory::Numerical => HsStatus::Numerical,
        ErrorCategory::Io => HsStatus::Io,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (HsStatus, String)>) -> HsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside headsim".into());
            HsStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (HsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (HsStatus, String) {
    (HsStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Opens a tensor bundle directory and loads its attention weights.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hs_model_open(path: *const c_char, out: *mut *mut HsModel) -> HsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (HsStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let bundle = load_bundle(path).map_err(lib_err)?;
        let weights = ModelWeights::from_bundle(&bundle, false).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(HsModel { weights }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `hs_model_open` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hs_model_free(model: *mut HsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn hs_model_config(model: *const HsModel, out: *mut HsModelConfig) -> HsStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = model.weights.config;
        *out = HsModelConfig {
            d_model: c.d_model,
            d_head: c.d_head,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            vocab_size: c.vocab_size,
        };
        Ok(())
    })
}

/// Scores all pairs of `pairing` (two letters such as "OQ").
///
/// # Safety
/// `model` must be valid, `pairing` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hs_score_pairs(
    model: *const HsModel,
    metric: HsMetric,
    pairing: *const c_char,
    mode: HsPairMode,
    out: *mut *mut HsTable,
) -> HsStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if pairing.is_null() {
            return Err(null("pairing"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let pairing: PairingType = CStr::from_ptr(pairing)
            .to_str()
            .map_err(|_| (HsStatus::InvalidArgument, "pairing is not UTF-8".to_string()))?
            .parse()
            .map_err(lib_err)?;
        let metric = match metric {
            HsMetric::Pk => Metric::Pk,
            HsMetric::Cs => Metric::Cs,
            HsMetric::SimpleCs => Metric::SimpleCs,
            HsMetric::LinearCka => Metric::LinearCka,
            HsMetric::Procrustes => Metric::Procrustes,
        };
        let mode = match mode {
            HsPairMode::StrictEarlier => PairMode::StrictEarlier,
            HsPairMode::SameType => PairMode::SameType,
        };
        let table = score_all_pairs(&model.weights, metric, pairing, mode).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(HsTable { table }));
        Ok(())
    })
}

/// Number of pairs; 0 for a null table.
///
/// # Safety
/// `table` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn hs_table_len(table: *const HsTable) -> usize {
    table.as_ref().map_or(0, |t| t.table.len())
}

/// # Safety
/// `table` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn hs_table_get(table: *const HsTable, index: usize, out: *mut HsPairScore) -> HsStatus {
    guard(|| {
        let table = table.as_ref().ok_or_else(|| null("table"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let e = table.table.entries.get(index).ok_or_else(|| {
            (
                HsStatus::InvalidArgument,
                format!("index {index} out of range for {} pairs", table.table.len()),
            )
        })?;
        *out = HsPairScore {
            src_layer: e.src.layer,
            src_head: e.src.head,
            dst_layer: e.dst.layer,
            dst_head: e.dst.head,
            score: e.score,
        };
        Ok(())
    })
}

/// # Safety
/// `table` must come from `hs_score_pairs` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hs_table_free(table: *mut HsTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// PK between the column spans of two d x m matrices in column-major order.
///
/// # Safety
/// `a` and `b` must each point to d*m doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_projection_kernel(
    a: *const f64,
    b: *const f64,
    d: usize,
    m: usize,
    out: *mut f64,
) -> HsStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("input matrix"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if m == 0 || m > d {
            return Err((HsStatus::InvalidArgument, format!("need 0 < m <= d, got d={d}, m={m}")));
        }
        let load = |p: *const f64| {
            let slice = std::slice::from_raw_parts(p, d * m);
            orthonormalize(&DMatrix::from_column_slice(d, m, slice)).map_err(lib_err)
        };
        *out = projection_kernel(&load(a)?, &load(b)?).map_err(lib_err)?;
        Ok(())
    })
}

/// Mean and variance of PK between independent uniform m-subspaces of R^d.
///
/// # Safety
/// `mean` and `variance` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_tight_reference(d: usize, m: usize, mean: *mut f64, variance: *mut f64) -> HsStatus {
    guard(|| {
        let mean = mean.as_mut().ok_or_else(|| null("mean"))?;
        let variance = variance.as_mut().ok_or_else(|| null("variance"))?;
        let r = tight_reference(d, m).map_err(lib_err)?;
        *mean = r.mean;
        *variance = r.variance;
        Ok(())
    })
}
