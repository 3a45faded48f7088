//! C ABI over the shades toolkit.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a
//! [`ShadesStatus`]; on failure a message is kept per thread and can be read
//! with [`shades_last_error_message`] until the next failing call on that
//! thread. Panics are caught and reported as [`ShadesStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use shades::classify::{predict_for_user, ShadeClassifierSet, UserRef};
use shades::factorization::{fit_bayesian, fit_map, impute, FactorHyperParams, FactorModel, GibbsConfig};
use shades::labels::{load_labels, LabelMatrix};
use shades::shades::{cluster_annotators, prune_small, SelectOptions, ShadeAssignment, SilhouetteVariant};
use shades::{Error, ErrorCategory};

/// Result of every fallible call. Values 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadesStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or out-of-range argument.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
    Panic = 5,
}

pub struct ShadesLabels {
    inner: LabelMatrix,
}

pub struct ShadesModel {
    inner: FactorModel,
}

pub struct ShadesAssignment {
    inner: ShadeAssignment,
}

pub struct ShadesClassifiers {
    inner: ShadeClassifierSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ShadesStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.category() {
            ErrorCategory::Config => ShadesStatus::Config,
            ErrorCategory::Data => ShadesStatus::Data,
            ErrorCategory::Numerical => ShadesStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ShadesStatus::InvalidArgument, msg.into())
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ShadesStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ShadesStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            ShadesStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn read_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    out.write(value);
    Ok(())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failing call on this thread, or null if none. The
/// string stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn shades_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn shades_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load one attribute from a label CSV. `attribute` may be null when the file
/// holds a single attribute.
///
/// # Safety
/// `path` and a non-null `attribute` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shades_labels_load(
    path: *const c_char,
    attribute: *const c_char,
    out: *mut *mut ShadesLabels,
) -> ShadesStatus {
    guard(|| {
        let path = PathBuf::from(read_str(path, "path")?);
        let attribute = if attribute.is_null() {
            None
        } else {
            Some(read_str(attribute, "attribute")?)
        };
        let inner = load_labels(&path, attribute)?;
        write_out(out, boxed(ShadesLabels { inner }), "out")
    })
}

/// Build a label matrix from parallel arrays of `count` observations.
/// Annotators and items get ids `a{i}` and `x{j}`.
///
/// # Safety
/// Each array must hold `count` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shades_labels_from_triples(
    num_annotators: usize,
    num_items: usize,
    annotators: *const u32,
    items: *const u32,
    labels: *const u8,
    count: usize,
    out: *mut *mut ShadesLabels,
) -> ShadesStatus {
    guard(|| {
        let a = slice(annotators, count, "annotators")?;
        let it = slice(items, count, "items")?;
        let l = slice(labels, count, "labels")?;
        let triples = (0..count).map(|k| (a[k] as usize, it[k] as usize, l[k]));
        let inner = LabelMatrix::from_triples(num_annotators, num_items, triples)?;
        write_out(out, boxed(ShadesLabels { inner }), "out")
    })
}

/// # Safety
/// `labels` must be a live handle; output pointers may be null to skip.
#[no_mangle]
pub unsafe extern "C" fn shades_labels_dims(
    labels: *const ShadesLabels,
    num_annotators: *mut usize,
    num_items: *mut usize,
    num_observations: *mut usize,
) -> ShadesStatus {
    guard(|| {
        let m = &read_ref(labels, "labels")?.inner;
        for (p, v) in [
            (num_annotators, m.num_annotators()),
            (num_items, m.num_items()),
            (num_observations, m.len()),
        ] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `labels` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn shades_labels_free(labels: *mut ShadesLabels) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

fn hyper(dim: usize, sigma2: f64) -> Result<FactorHyperParams, Failure> {
    if dim == 0 {
        return Err(invalid("dim must be at least 1"));
    }
    let mut h = FactorHyperParams::new(dim);
    if sigma2 > 0.0 {
        h = h.with_sigma2(sigma2);
    }
    h.validate()?;
    Ok(h)
}

/// Bayesian factorization by Gibbs sampling. `sigma2 <= 0` selects the default
/// observation variance.
///
/// # Safety
/// `labels` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shades_fit_bayesian(
    labels: *const ShadesLabels,
    dim: usize,
    samples: usize,
    burn_in: usize,
    sigma2: f64,
    seed: u64,
    out: *mut *mut ShadesModel,
) -> ShadesStatus {
    guard(|| {
        let m = &read_ref(labels, "labels")?.inner;
        let config = GibbsConfig {
            samples,
            burn_in,
            keep_samples: false,
            init_iters: GibbsConfig::default().init_iters,
        };
        let inner = fit_bayesian(m, &hyper(dim, sigma2)?, &config, seed)?;
        write_out(out, boxed(ShadesModel { inner }), "out")
    })
}

/// MAP factorization by gradient descent.
///
/// # Safety
/// `labels` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shades_fit_map(
    labels: *const ShadesLabels,
    dim: usize,
    step: f64,
    max_iters: usize,
    seed: u64,
    out: *mut *mut ShadesModel,
) -> ShadesStatus {
    guard(|| {
        let m = &read_ref(labels, "labels")?.inner;
        let inner = fit_map(m, &hyper(dim, 0.0)?, step, max_iters, seed)?;
        write_out(out, boxed(ShadesModel { inner }), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shades_model_load(path: *const c_char, out: *mut *mut ShadesModel) -> ShadesStatus {
    guard(|| {
        let inner = FactorModel::load(&PathBuf::from(read_str(path, "path")?))?;
        write_out(out, boxed(ShadesModel { inner }), "out")
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn shades_model_save(model: *const ShadesModel, path: *const c_char) -> ShadesStatus {
    guard(|| {
        let m = &read_ref(model, "model")?.inner;
        m.save(&PathBuf::from(read_str(path, "path")?), None)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; output pointers may be null to skip.
#[no_mangle]
pub unsafe extern "C" fn shades_model_dims(
    model: *const ShadesModel,
    dim: *mut usize,
    num_annotators: *mut usize,
    num_items: *mut usize,
) -> ShadesStatus {
    guard(|| {
        let m = &read_ref(model, "model")?.inner;
        for (p, v) in [(dim, m.dim()), (num_annotators, m.num_annotators()), (num_items, m.num_items())] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Imputed score in [0, 1] for annotator `annotator` on item `item`.
///
/// # Safety
/// `model` must be a live handle; `score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shades_impute(
    model: *const ShadesModel,
    annotator: usize,
    item: usize,
    score: *mut f64,
) -> ShadesStatus {
    guard(|| {
        let m = &read_ref(model, "model")?.inner;
        write_out(score, impute(m, annotator, item)?, "score")
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn shades_model_free(model: *mut ShadesModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Cluster the annotator factors with K chosen by silhouette over
/// `[k_min, k_max]`, then drop shades smaller than `min_size`. A nonzero
/// `nearest` selects the nearest-cluster silhouette instead of the default.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shades_select_k(
    model: *const ShadesModel,
    k_min: usize,
    k_max: usize,
    min_size: usize,
    nearest: i32,
    seed: u64,
    out: *mut *mut ShadesAssignment,
) -> ShadesStatus {
    guard(|| {
        let m = &read_ref(model, "model")?.inner;
        if k_min < 2 || k_max < k_min {
            return Err(invalid(format!("invalid K range {k_min}..{k_max}")));
        }
        let options = SelectOptions {
            k_min,
            k_max,
            variant: if nearest != 0 {
                SilhouetteVariant::Nearest
            } else {
                SilhouetteVariant::MeanOverClusters
            },
            ..SelectOptions::default()
        };
        let found = cluster_annotators(m, &options, seed)?;
        let inner = prune_small(&found, min_size)?;
        write_out(out, boxed(ShadesAssignment { inner }), "out")
    })
}

/// Selected K (before pruning) and the number of annotators.
///
/// # Safety
/// `assignment` must be a live handle; output pointers may be null to skip.
#[no_mangle]
pub unsafe extern "C" fn shades_assignment_dims(
    assignment: *const ShadesAssignment,
    k: *mut usize,
    num_annotators: *mut usize,
) -> ShadesStatus {
    guard(|| {
        let a = &read_ref(assignment, "assignment")?.inner;
        for (p, v) in [(k, a.k), (num_annotators, a.assignment.len())] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Shade of one annotator, or -1 if its shade was pruned.
///
/// # Safety
/// `assignment` must be a live handle; `shade` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shades_assignment_get(
    assignment: *const ShadesAssignment,
    annotator: usize,
    shade: *mut i64,
) -> ShadesStatus {
    guard(|| {
        let a = &read_ref(assignment, "assignment")?.inner;
        let s = a
            .assignment
            .get(annotator)
            .ok_or_else(|| invalid(format!("annotator {annotator} out of range")))?;
        write_out(shade, s.map_or(-1, |s| s as i64), "shade")
    })
}

/// # Safety
/// `assignment` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn shades_assignment_free(assignment: *mut ShadesAssignment) {
    if !assignment.is_null() {
        drop(Box::from_raw(assignment));
    }
}

/// Load a classifier set written by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shades_classifiers_load(path: *const c_char, out: *mut *mut ShadesClassifiers) -> ShadesStatus {
    guard(|| {
        let inner = ShadeClassifierSet::load(&PathBuf::from(read_str(path, "path")?))?;
        write_out(out, boxed(ShadesClassifiers { inner }), "out")
    })
}

/// Label for a known user on one raw feature vector. An unknown user, or a
/// null `user`, is answered by the consensus model and `fallback` is set to 1.
///
/// # Safety
/// `set` must be a live handle, `features` must hold `len` values, and
/// `label` must be writable; `margin` and `fallback` may be null.
#[no_mangle]
pub unsafe extern "C" fn shades_predict(
    set: *const ShadesClassifiers,
    user: *const c_char,
    features: *const f64,
    len: usize,
    label: *mut u8,
    margin: *mut f64,
    fallback: *mut i32,
) -> ShadesStatus {
    guard(|| {
        let s = &read_ref(set, "classifiers")?.inner;
        let x = slice(features, len, "features")?;
        if x.len() != s.standardization.mean.len() {
            return Err(invalid(format!(
                "expected {} features, got {}",
                s.standardization.mean.len(),
                x.len()
            )));
        }
        let p = if user.is_null() {
            let mut p = s.predict_consensus(x);
            p.fallback = true;
            p
        } else {
            predict_for_user(s, &UserRef::Known(read_str(user, "user")?.to_string()), x)
        };
        write_out(label, p.label, "label")?;
        if !margin.is_null() {
            margin.write(p.margin);
        }
        if !fallback.is_null() {
            fallback.write(i32::from(p.fallback));
        }
        Ok(())
    })
}

/// # Safety
/// `set` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn shades_classifiers_free(set: *mut ShadesClassifiers) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}
