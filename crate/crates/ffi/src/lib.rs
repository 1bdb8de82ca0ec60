//! C interface to the classsr engine.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_parse`
//! style constructors and released with the matching `*_free`. Every fallible
//! call returns a [`ClasssrStatus`]; on failure the message is available from
//! [`classsr_last_error`] until the next failing call on the same thread.
//! Strings returned through `char **` are owned by the caller and released
//! with [`classsr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use classsr::expr::{evaluate, parse_infix, Expression, LibrarySpec, MultiDataset, Realization, TokenLibrary};
use classsr::optimizer::{fit_constants_seeded, FitConfig};
use classsr::search::{run_search, RunConfig};
use classsr::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClasssrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dataset = 4,
    Parse = 5,
    Io = 6,
    Runtime = 7,
    Panic = 8,
}

/// Token vocabulary built from a library JSON description.
pub struct ClasssrLibrary {
    inner: TokenLibrary,
}

/// A set of realizations sharing variable layout and units.
pub struct ClasssrDataset {
    inner: MultiDataset,
}

/// An expression over the constants and variables of one library.
pub struct ClasssrExpression {
    inner: Expression,
    names: classsr::expr::Names,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(text).expect("nul bytes removed")));
}

fn status_of(e: &Error) -> ClasssrStatus {
    match e {
        Error::Config(_) | Error::Json { .. } => ClasssrStatus::Config,
        Error::Dataset(_) | Error::Csv { .. } | Error::DegenerateTarget => ClasssrStatus::Dataset,
        Error::Parse { .. } | Error::InvalidToken(_) => ClasssrStatus::Parse,
        Error::Io { .. } => ClasssrStatus::Io,
        Error::Contract(_) => ClasssrStatus::InvalidArgument,
        _ => ClasssrStatus::Runtime,
    }
}

struct Failure(ClasssrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ClasssrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ClasssrStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            ClasssrStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ClasssrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ClasssrStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(ClasssrStatus::Runtime, "string contains a nul byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn json_failure(e: serde_json::Error, what: &str) -> Failure {
    Failure(ClasssrStatus::Config, format!("{what}: {e}"))
}

/// Message of the last failure on this thread, or null. Valid until the next failure.
#[no_mangle]
pub extern "C" fn classsr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn classsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn classsr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Build a library from its JSON description.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn classsr_library_from_json(json: *const c_char, out: *mut *mut ClasssrLibrary) -> ClasssrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: LibrarySpec = serde_json::from_str(text(json, "json")?).map_err(|e| json_failure(e, "library"))?;
        let inner = TokenLibrary::from_spec(&spec)?;
        *out = Box::into_raw(Box::new(ClasssrLibrary { inner }));
        Ok(())
    })
}

/// # Safety
/// `lib` must be null or a handle from [`classsr_library_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn classsr_library_free(lib: *mut ClasssrLibrary) {
    if !lib.is_null() {
        drop(Box::from_raw(lib));
    }
}

/// Number of tokens in the vocabulary, or 0 for null.
///
/// # Safety
/// `lib` must be null or a live library handle.
#[no_mangle]
pub unsafe extern "C" fn classsr_library_size(lib: *const ClasssrLibrary) -> usize {
    lib.as_ref().map_or(0, |l| l.inner.len())
}

/// Load a dataset from a manifest file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn classsr_dataset_from_manifest(path: *const c_char, out: *mut *mut ClasssrDataset) -> ClasssrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = MultiDataset::load_manifest(Path::new(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(ClasssrDataset { inner }));
        Ok(())
    })
}

/// Build a unitless dataset from flat arrays.
///
/// Realization `i` has `n_samples[i]` rows. `x` holds every row in order,
/// each row `n_vars` values; `y` holds the matching targets.
///
/// # Safety
/// `n_samples` must point to `n_reals` counts, `x` to `n_vars * sum(n_samples)`
/// values and `y` to `sum(n_samples)` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn classsr_dataset_new(
    n_reals: usize,
    n_samples: *const usize,
    n_vars: usize,
    x: *const f64,
    y: *const f64,
    out: *mut *mut ClasssrDataset,
) -> ClasssrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n_reals == 0 {
            return Err(Failure(ClasssrStatus::InvalidArgument, "need at least one realization".into()));
        }
        if n_samples.is_null() {
            return Err(null("n_samples"));
        }
        let counts = std::slice::from_raw_parts(n_samples, n_reals);
        let total: usize = counts.iter().sum();
        let xs = slice(x, total * n_vars, "x")?;
        let ys = slice(y, total, "y")?;
        let mut reals = Vec::with_capacity(n_reals);
        let mut row = 0;
        for (i, &n) in counts.iter().enumerate() {
            let columns = (0..n_vars)
                .map(|j| (row..row + n).map(|r| xs[r * n_vars + j]).collect())
                .collect();
            reals.push(Realization::new(format!("realization{i}"), columns, ys[row..row + n].to_vec())?);
            row += n;
        }
        let inner = MultiDataset::unitless(reals)?;
        *out = Box::into_raw(Box::new(ClasssrDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn classsr_dataset_free(data: *mut ClasssrDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// # Safety
/// `data` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn classsr_dataset_n_realizations(data: *const ClasssrDataset) -> usize {
    data.as_ref().map_or(0, |d| d.inner.n_realizations())
}

/// Parse an infix expression against `lib`.
///
/// # Safety
/// `lib` must be a live library handle, `infix` nul-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn classsr_expression_parse(
    lib: *const ClasssrLibrary,
    infix: *const c_char,
    out: *mut *mut ClasssrExpression,
) -> ClasssrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let lib = handle(lib, "lib")?;
        let inner = parse_infix(text(infix, "infix")?, &lib.inner)?;
        *out = Box::into_raw(Box::new(ClasssrExpression { inner, names: lib.inner.names().clone() }));
        Ok(())
    })
}

/// # Safety
/// `expr` must be null or a live expression handle.
#[no_mangle]
pub unsafe extern "C" fn classsr_expression_free(expr: *mut ClasssrExpression) {
    if !expr.is_null() {
        drop(Box::from_raw(expr));
    }
}

/// Node count, or 0 for null.
///
/// # Safety
/// `expr` must be null or a live expression handle.
#[no_mangle]
pub unsafe extern "C" fn classsr_expression_complexity(expr: *const ClasssrExpression) -> usize {
    expr.as_ref().map_or(0, |e| e.inner.complexity())
}

/// Canonical infix form.
///
/// # Safety
/// `expr` must be a live expression handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn classsr_expression_to_infix(expr: *const ClasssrExpression, out: *mut *mut c_char) -> ClasssrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let e = handle(expr, "expr")?;
        put_string(out, e.inner.to_infix(&e.names))
    })
}

/// Evaluate on `n_samples` rows of `x` (row-major, one column per library
/// variable) with the given constants. `*invalid` is set to 1 when the
/// protected evaluation flagged a domain violation.
///
/// # Safety
/// Arrays must hold the stated number of values; `out` must hold `n_samples`.
#[no_mangle]
pub unsafe extern "C" fn classsr_expression_evaluate(
    expr: *const ClasssrExpression,
    n_samples: usize,
    n_vars: usize,
    x: *const f64,
    class_vals: *const f64,
    n_class: usize,
    spe_vals: *const f64,
    n_spe: usize,
    out: *mut f64,
    invalid: *mut i32,
) -> ClasssrStatus {
    guard(|| {
        let e = handle(expr, "expr")?;
        if out.is_null() || invalid.is_null() {
            return Err(null("output buffer"));
        }
        let xs = slice(x, n_samples * n_vars, "x")?;
        let columns = (0..n_vars).map(|j| (0..n_samples).map(|r| xs[r * n_vars + j]).collect()).collect();
        let real = Realization::new("ffi", columns, vec![0.0; n_samples])?;
        let res = evaluate(&e.inner, &real, slice(class_vals, n_class, "class_vals")?, slice(spe_vals, n_spe, "spe_vals")?)?;
        std::slice::from_raw_parts_mut(out, n_samples).copy_from_slice(&res.values);
        *invalid = i32::from(res.invalid);
        Ok(())
    })
}

/// Fit the constants of `expr` to `data`; the fit result is written as JSON.
/// `fit_config_json` may be null for defaults.
///
/// # Safety
/// Handles must be live; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn classsr_fit_constants(
    expr: *const ClasssrExpression,
    data: *const ClasssrDataset,
    fit_config_json: *const c_char,
    seed: u64,
    out_json: *mut *mut c_char,
) -> ClasssrStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let e = handle(expr, "expr")?;
        let d = handle(data, "data")?;
        let cfg: FitConfig = if fit_config_json.is_null() {
            FitConfig::default()
        } else {
            serde_json::from_str(text(fit_config_json, "fit_config_json")?).map_err(|e| json_failure(e, "fit config"))?
        };
        cfg.validate()?;
        if e.inner.n_vars_used() > d.inner.n_vars() {
            return Err(Failure(ClasssrStatus::InvalidArgument, "expression uses more variables than the data has".into()));
        }
        let fit = fit_constants_seeded(&e.inner, &d.inner, &cfg, seed);
        put_string(out_json, serde_json::to_string(&fit).expect("fit serializes"))
    })
}

/// Run a full search; the Pareto front is written as JSON.
///
/// # Safety
/// `data` must be live, `run_config_json` nul-terminated, `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn classsr_search(
    data: *const ClasssrDataset,
    run_config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> ClasssrStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let d = handle(data, "data")?;
        let cfg: RunConfig = serde_json::from_str(text(run_config_json, "run_config_json")?)
            .map_err(|e| json_failure(e, "run config"))?;
        let library = cfg.validate()?;
        let outcome = run_search(&d.inner, &cfg)?;
        put_string(out_json, classsr::search::front_json(&outcome.front, &library))
    })
}
