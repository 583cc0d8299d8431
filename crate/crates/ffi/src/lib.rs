//! C ABI over the disco3d engine.
//!
//! Handles are opaque pointers owned by this library; every constructor has
//! a matching `_free`. Functions return [`DiscoStatus`]; on failure the
//! thread-local message behind [`disco_last_error_message`] describes the
//! problem. Strings passed in are NUL-terminated UTF-8; strings passed out
//! are owned by the caller and released with [`disco_string_free`].

use disco3d::eval::{
    classify_points, evaluate, export_confidence, match_clip, match_hungarian, ClassifyMode, ExportFormat,
    DEFAULT_MIN_SHARE,
};
use disco3d::fieldset::{generate_synthetic_scene, load_fieldset, save_fieldset, FieldSet, GeneratorSpec};
use disco3d::guidance::parse_query_json;
use disco3d::trainer::{load_checkpoint, run, save_checkpoint, RunConfig, RunOutput};
use disco3d::{Error, QuerySet};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscoStatus {
    Ok = 0,
    /// A required pointer was null or an argument failed validation.
    InvalidArgument = 1,
    Io = 2,
    /// Malformed file or payload content.
    Format = 3,
    /// A non-finite value aborted the computation.
    Numeric = 4,
    /// Unexpected internal failure.
    Internal = 5,
}

/// An immutable feature field (samples, optional rays, class catalog).
pub struct DiscoFieldSet {
    inner: FieldSet,
}

/// A trained run: projector parameters, prototype bank, config, telemetry.
pub struct DiscoRun {
    inner: RunOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(e: &Error) -> DiscoStatus {
    set_error(&e.to_string());
    match e {
        Error::Validation(_) | Error::Usage(_) => DiscoStatus::InvalidArgument,
        Error::Io(_) => DiscoStatus::Io,
        Error::Format { .. } => DiscoStatus::Format,
        Error::Numeric(_) => DiscoStatus::Numeric,
    }
}

fn invalid(message: &str) -> DiscoStatus {
    set_error(message);
    DiscoStatus::InvalidArgument
}

/// Guard against panics unwinding across the FFI boundary.
fn guarded(body: impl FnOnce() -> DiscoStatus) -> DiscoStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            DiscoStatus::Internal
        }
    }
}

/// # Safety
/// `s` must be null or a NUL-terminated string valid for the call.
unsafe fn required_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, DiscoStatus> {
    if s.is_null() {
        return Err(invalid(&format!("{what} must not be null")));
    }
    unsafe { CStr::from_ptr(s) }
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not valid UTF-8")))
}

unsafe fn optional_str<'a>(s: *const c_char, what: &str) -> Result<Option<&'a str>, DiscoStatus> {
    if s.is_null() {
        Ok(None)
    } else {
        unsafe { required_str(s, what) }.map(Some)
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn disco_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by a `disco_*` function (or
/// null) and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn disco_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Generate a synthetic fieldset from a TOML generator spec.
///
/// # Safety
/// `spec_toml` must be a NUL-terminated string; `out` must be a valid
/// destination pointer.
#[no_mangle]
pub unsafe extern "C" fn disco_fieldset_generate(
    spec_toml: *const c_char,
    out: *mut *mut DiscoFieldSet,
) -> DiscoStatus {
    guarded(|| {
        if out.is_null() {
            return invalid("out must not be null");
        }
        let text = match unsafe { required_str(spec_toml, "spec_toml") } {
            Ok(t) => t,
            Err(s) => return s,
        };
        let spec: GeneratorSpec = match toml::from_str(text) {
            Ok(s) => s,
            Err(e) => return invalid(&format!("generator spec: {e}")),
        };
        match generate_synthetic_scene(&spec) {
            Ok(fs) => {
                unsafe { *out = Box::into_raw(Box::new(DiscoFieldSet { inner: fs })) };
                DiscoStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Load a fieldset from a field file (the catalog sidecar is picked up
/// automatically when present).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn disco_fieldset_load(path: *const c_char, out: *mut *mut DiscoFieldSet) -> DiscoStatus {
    guarded(|| {
        if out.is_null() {
            return invalid("out must not be null");
        }
        let path = match unsafe { required_str(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_fieldset(Path::new(path)) {
            Ok(fs) => {
                unsafe { *out = Box::into_raw(Box::new(DiscoFieldSet { inner: fs })) };
                DiscoStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Write a fieldset (and its catalog sidecar) to disk.
///
/// # Safety
/// `fieldset` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn disco_fieldset_save(fieldset: *const DiscoFieldSet, path: *const c_char) -> DiscoStatus {
    guarded(|| {
        let Some(fs) = (unsafe { fieldset.as_ref() }) else {
            return invalid("fieldset must not be null");
        };
        let path = match unsafe { required_str(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match save_fieldset(&fs.inner, Path::new(path)) {
            Ok(()) => DiscoStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Number of samples in a fieldset (0 for a null handle).
///
/// # Safety
/// `fieldset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn disco_fieldset_sample_count(fieldset: *const DiscoFieldSet) -> u64 {
    unsafe { fieldset.as_ref() }.map_or(0, |fs| fs.inner.samples.len() as u64)
}

/// Release a fieldset handle.
///
/// # Safety
/// `fieldset` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn disco_fieldset_free(fieldset: *mut DiscoFieldSet) {
    if !fieldset.is_null() {
        drop(unsafe { Box::from_raw(fieldset) });
    }
}

/// Train on a fieldset. `queries_json` (nullable) follows the query-file
/// schema with catalog references resolved against the fieldset's catalog;
/// `config_toml` (nullable) overrides the stock run configuration. As in
/// the CLI, a query-free call treats the whole prototype budget as
/// clustering capacity, while queries size the relevant block themselves.
///
/// # Safety
/// `fieldset` must be a live handle; strings NUL-terminated or null; `out`
/// valid.
#[no_mangle]
pub unsafe extern "C" fn disco_train(
    fieldset: *const DiscoFieldSet,
    queries_json: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut DiscoRun,
) -> DiscoStatus {
    guarded(|| {
        if out.is_null() {
            return invalid("out must not be null");
        }
        let Some(fs) = (unsafe { fieldset.as_ref() }) else {
            return invalid("fieldset must not be null");
        };
        let config = match unsafe { optional_str(config_toml, "config_toml") } {
            Ok(Some(text)) => match RunConfig::from_toml_str(text) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            },
            Ok(None) => RunConfig::default(),
            Err(s) => return s,
        };
        let queryset = match unsafe { optional_str(queries_json, "queries_json") } {
            Ok(Some(text)) => match parse_query_json(text, &fs.inner.catalog, config.tau_default) {
                Ok(q) => q,
                Err(e) => return fail(&e),
            },
            Ok(None) => QuerySet::empty(),
            Err(s) => return s,
        };
        let mut config = config;
        if queryset.is_empty() {
            config.n_rel += config.n_irr;
            config.n_irr = 0;
        } else {
            config.n_rel = queryset.required_n_rel();
        }
        match run(&fs.inner, &queryset, &config) {
            Ok(output) => {
                unsafe { *out = Box::into_raw(Box::new(DiscoRun { inner: output })) };
                DiscoStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Persist a trained run as a checkpoint file.
///
/// # Safety
/// `run_handle` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn disco_run_save(run_handle: *const DiscoRun, path: *const c_char) -> DiscoStatus {
    guarded(|| {
        let Some(r) = (unsafe { run_handle.as_ref() }) else {
            return invalid("run must not be null");
        };
        let path = match unsafe { required_str(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match save_checkpoint(&r.inner, Path::new(path)) {
            Ok(()) => DiscoStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Load a checkpoint file into a run handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn disco_run_load(path: *const c_char, out: *mut *mut DiscoRun) -> DiscoStatus {
    guarded(|| {
        if out.is_null() {
            return invalid("out must not be null");
        }
        let path = match unsafe { required_str(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(Path::new(path)) {
            Ok(output) => {
                unsafe { *out = Box::into_raw(Box::new(DiscoRun { inner: output })) };
                DiscoStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a run handle.
///
/// # Safety
/// `run_handle` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn disco_run_free(run_handle: *mut DiscoRun) {
    if !run_handle.is_null() {
        drop(unsafe { Box::from_raw(run_handle) });
    }
}

/// Evaluate a trained run against the fieldset's ground-truth labels and
/// return the metric report as a JSON string (caller frees). Pass a nonzero
/// `use_hungarian` for spatial matching, zero for embedding matching.
///
/// # Safety
/// Handles must be live; `report_json` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn disco_evaluate_json(
    run_handle: *const DiscoRun,
    fieldset: *const DiscoFieldSet,
    use_hungarian: i32,
    report_json: *mut *mut c_char,
) -> DiscoStatus {
    guarded(|| {
        if report_json.is_null() {
            return invalid("report_json must not be null");
        }
        let (Some(r), Some(fs)) = (unsafe { run_handle.as_ref() }, unsafe { fieldset.as_ref() }) else {
            return invalid("run and fieldset must not be null");
        };
        let points: Vec<usize> = (0..fs.inner.samples.len())
            .filter(|&i| fs.inner.samples[i].gt_label.is_some())
            .collect();
        if points.is_empty() {
            return invalid("evaluation requires ground-truth labels in the fieldset");
        }
        let gt: Vec<Option<u32>> = points.iter().map(|&i| fs.inner.samples[i].gt_label).collect();
        let n_gt = if fs.inner.catalog.is_empty() {
            gt.iter().flatten().map(|&g| g as usize + 1).max().unwrap_or(0)
        } else {
            fs.inner.catalog.len()
        };
        let result = (|| -> disco3d::Result<String> {
            let mut result =
                classify_points(&fs.inner, &points, &r.inner.params, &r.inner.bank, ClassifyMode::Direct)?;
            result.matched_ids = if use_hungarian != 0 {
                match_hungarian(&result, &gt, n_gt, DEFAULT_MIN_SHARE)?
            } else {
                match_clip(&result, &r.inner.bank, &fs.inner.catalog, DEFAULT_MIN_SHARE)?
            };
            let report = evaluate(&result, &gt, n_gt, DEFAULT_MIN_SHARE)?;
            serde_json::to_string(&report).map_err(|e| Error::Usage(format!("report serialization: {e}")))
        })();
        match result {
            Ok(json) => match CString::new(json) {
                Ok(c) => {
                    unsafe { *report_json = c.into_raw() };
                    DiscoStatus::Ok
                }
                Err(_) => {
                    set_error("report contained an interior NUL");
                    DiscoStatus::Internal
                }
            },
            Err(e) => fail(&e),
        }
    })
}

/// Classify every sample with a trained run and write the
/// `x,y,z,label,confidence` CSV.
///
/// # Safety
/// Handles must be live; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn disco_export_csv(
    run_handle: *const DiscoRun,
    fieldset: *const DiscoFieldSet,
    path: *const c_char,
) -> DiscoStatus {
    guarded(|| {
        let (Some(r), Some(fs)) = (unsafe { run_handle.as_ref() }, unsafe { fieldset.as_ref() }) else {
            return invalid("run and fieldset must not be null");
        };
        let path = match unsafe { required_str(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let points: Vec<usize> = (0..fs.inner.samples.len()).collect();
        let result = (|| -> disco3d::Result<()> {
            let result =
                classify_points(&fs.inner, &points, &r.inner.params, &r.inner.bank, ClassifyMode::Direct)?;
            export_confidence(&result, Path::new(path), ExportFormat::Csv)
        })();
        match result {
            Ok(()) => DiscoStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

// Keep the raw pointer out of the public surface so cbindgen sees plain
// `DiscoStatus disco_* (...)` signatures; nothing here is exported as data.
const _: () = {
    assert!(std::mem::size_of::<DiscoStatus>() == std::mem::size_of::<i32>());
};
