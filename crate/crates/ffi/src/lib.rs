//! C ABI over the pipeline: opaque handles, status codes, stage functions.
//!
//! Every function is panic-safe and returns a [`CptlabStatus`]; the handle
//! keeps the last error message, readable via `cptlab_pipeline_last_error`.
//! Strings returned through out-pointers are NUL-terminated and owned by
//! the caller, to be released with `cptlab_string_free`.

use cptlab::config::RunConfigFile;
use cptlab::error::Error;
use cptlab::pipeline::{self, Overrides};
use libc::{c_char, c_double};
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

/// Status code of every C API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CptlabStatus {
    Ok = 0,
    /// A required pointer argument was NULL or not valid UTF-8.
    InvalidArg = 1,
    /// Configuration or input data rejected.
    Config = 2,
    Io = 3,
    /// A pipeline artifact is missing; run the earlier stage first.
    MissingArtifact = 4,
    /// Non-finite values or training divergence.
    Numeric = 5,
    /// A file did not parse as the expected format.
    Format = 6,
    Panic = 7,
}

fn status_of(e: &Error) -> CptlabStatus {
    match e {
        Error::Io(_) => CptlabStatus::Io,
        Error::MissingArtifact { .. } => CptlabStatus::MissingArtifact,
        Error::NonFinite { .. } | Error::Diverged { .. } => CptlabStatus::Numeric,
        Error::Format(_) => CptlabStatus::Format,
        _ => CptlabStatus::Config,
    }
}

/// Opaque pipeline handle: a validated config plus an artifact directory.
pub struct CptlabPipeline {
    config: RunConfigFile,
    out_dir: PathBuf,
    last_error: CString,
}

impl CptlabPipeline {
    fn set_error(&mut self, e: &Error) {
        let msg = e.to_string().replace('\0', " ");
        self.last_error = CString::new(msg).unwrap_or_default();
    }
}

fn utf8_arg<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        return None;
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().ok()
}

/// Version string of the library; static storage, do not free.
#[no_mangle]
pub extern "C" fn cptlab_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Create a pipeline handle from a config file path and an artifact
/// directory. On success writes the handle to `out` and returns Ok.
///
/// # Safety
/// `config_path` and `out_dir` must be NUL-terminated strings; `out` must
/// be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn cptlab_pipeline_new(
    config_path: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut CptlabPipeline,
) -> CptlabStatus {
    if out.is_null() {
        return CptlabStatus::InvalidArg;
    }
    unsafe { *out = ptr::null_mut() };
    let (Some(config_path), Some(dir)) = (utf8_arg(config_path), utf8_arg(out_dir)) else {
        return CptlabStatus::InvalidArg;
    };
    let result = catch_unwind(|| {
        pipeline::load_config(std::path::Path::new(config_path), &Overrides::default())
    });
    match result {
        Ok(Ok(config)) => {
            let handle = Box::new(CptlabPipeline {
                config,
                out_dir: PathBuf::from(dir),
                last_error: CString::default(),
            });
            unsafe { *out = Box::into_raw(handle) };
            CptlabStatus::Ok
        }
        Ok(Err(e)) => status_of(&e),
        Err(_) => CptlabStatus::Panic,
    }
}

/// Release a handle created by `cptlab_pipeline_new`.
///
/// # Safety
/// `p` must be a handle from `cptlab_pipeline_new`, not yet freed; NULL is
/// a no-op.
#[no_mangle]
pub unsafe extern "C" fn cptlab_pipeline_free(p: *mut CptlabPipeline) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Last error message of a handle; empty string when the previous call
/// succeeded. Valid until the next call on the same handle.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cptlab_pipeline_last_error(p: *const CptlabPipeline) -> *const c_char {
    if p.is_null() {
        return ptr::null();
    }
    unsafe { (*p).last_error.as_ptr() }
}

unsafe fn run_stage<F>(p: *mut CptlabPipeline, f: F) -> CptlabStatus
where
    F: FnOnce(&RunConfigFile, &std::path::Path) -> cptlab::Result<()>,
{
    let Some(handle) = (unsafe { p.as_mut() }) else {
        return CptlabStatus::InvalidArg;
    };
    handle.last_error = CString::default();
    let (config, out_dir) = (handle.config.clone(), handle.out_dir.clone());
    match catch_unwind(AssertUnwindSafe(|| f(&config, &out_dir))) {
        Ok(Ok(())) => CptlabStatus::Ok,
        Ok(Err(e)) => {
            let code = status_of(&e);
            handle.set_error(&e);
            code
        }
        Err(_) => CptlabStatus::Panic,
    }
}

/// Generate the synthetic bilingual corpora into the artifact directory.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cptlab_pipeline_gen_data(p: *mut CptlabPipeline) -> CptlabStatus {
    unsafe { run_stage(p, |cfg, out| pipeline::gen_data(cfg, out).map(|_| ())) }
}

/// Compute importance scores (pre-training and caching the base model when
/// absent).
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cptlab_pipeline_score(p: *mut CptlabPipeline) -> CptlabStatus {
    unsafe { run_stage(p, pipeline::run_score) }
}

/// Build the freeze mask.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cptlab_pipeline_mask(p: *mut CptlabPipeline) -> CptlabStatus {
    unsafe { run_stage(p, |cfg, out| pipeline::run_mask(cfg, out).map(|_| ())) }
}

/// Continually pre-train on the target corpus.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cptlab_pipeline_train(p: *mut CptlabPipeline) -> CptlabStatus {
    unsafe { run_stage(p, pipeline::run_train) }
}

/// Evaluate retention and write report.json.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cptlab_pipeline_eval(p: *mut CptlabPipeline) -> CptlabStatus {
    unsafe { run_stage(p, |cfg, out| pipeline::run_eval(cfg, out).map(|_| ())) }
}

/// Run the freezing-ratio sweep and write sweep.tsv / sweep.jsonl.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cptlab_pipeline_sweep(p: *mut CptlabPipeline) -> CptlabStatus {
    unsafe { run_stage(p, |cfg, out| pipeline::run_sweep(cfg, out).map(|_| ())) }
}

/// Forgetting/acquisition of the adapted model, read from report.json
/// (run the eval stage first).
///
/// # Safety
/// `p` must be a live handle; `forgetting_pct` and `acquisition_pct` must
/// be valid writable pointers.
#[no_mangle]
pub unsafe extern "C" fn cptlab_pipeline_retention(
    p: *mut CptlabPipeline,
    forgetting_pct: *mut c_double,
    acquisition_pct: *mut c_double,
) -> CptlabStatus {
    if forgetting_pct.is_null() || acquisition_pct.is_null() {
        return CptlabStatus::InvalidArg;
    }
    let Some(handle) = (unsafe { p.as_mut() }) else {
        return CptlabStatus::InvalidArg;
    };
    let path = handle.out_dir.join(pipeline::REPORT_FILE);
    if !path.exists() {
        let e = Error::MissingArtifact {
            what: format!("report ({})", path.display()),
            stage: "eval".to_string(),
        };
        let code = status_of(&e);
        handle.set_error(&e);
        return code;
    }
    let parsed: Result<serde_json::Value, _> =
        std::fs::read_to_string(&path).map_err(Error::from).and_then(|s| {
            serde_json::from_str(&s).map_err(|e| Error::Format(e.to_string()))
        });
    match parsed {
        Ok(v) => {
            unsafe {
                *forgetting_pct = v["forgetting_pct"].as_f64().unwrap_or(f64::NAN);
                *acquisition_pct = v["acquisition_pct"].as_f64().unwrap_or(f64::NAN);
            }
            CptlabStatus::Ok
        }
        Err(e) => {
            let code = status_of(&e);
            handle.set_error(&e);
            code
        }
    }
}

/// Per-parameter freezing statistics of a mask file, as a JSON string the
/// caller frees with `cptlab_string_free`.
///
/// # Safety
/// `mask_path` must be a NUL-terminated string; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cptlab_mask_stats_json(
    mask_path: *const c_char,
    out_json: *mut *mut c_char,
) -> CptlabStatus {
    if out_json.is_null() {
        return CptlabStatus::InvalidArg;
    }
    unsafe { *out_json = ptr::null_mut() };
    let Some(path) = utf8_arg(mask_path) else {
        return CptlabStatus::InvalidArg;
    };
    let result = catch_unwind(|| -> cptlab::Result<String> {
        let (mask, _) = cptlab::masking::load_mask(std::path::Path::new(path))?;
        let stats = cptlab::masking::mask_stats(&mask);
        serde_json::to_string(&stats).map_err(|e| Error::Format(e.to_string()))
    });
    match result {
        Ok(Ok(json)) => {
            let c = CString::new(json.replace('\0', " ")).unwrap_or_default();
            unsafe { *out_json = c.into_raw() };
            CptlabStatus::Ok
        }
        Ok(Err(e)) => status_of(&e),
        Err(_) => CptlabStatus::Panic,
    }
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must originate from this library and not have been freed; NULL is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn cptlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
