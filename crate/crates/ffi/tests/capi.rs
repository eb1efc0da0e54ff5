//! Exercises the C ABI end to end, the way a foreign binding would.

use cptlab_ffi::*;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn smoke_config() -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    cstr(p.to_str().unwrap())
}

#[test]
fn version_is_nonempty() {
    let v = unsafe { CStr::from_ptr(cptlab_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn full_pipeline_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let out = cstr(dir.path().to_str().unwrap());
    let cfg = smoke_config();

    let mut handle: *mut CptlabPipeline = ptr::null_mut();
    let st = unsafe { cptlab_pipeline_new(cfg.as_ptr(), out.as_ptr(), &mut handle) };
    assert_eq!(st, CptlabStatus::Ok);
    assert!(!handle.is_null());

    unsafe {
        assert_eq!(cptlab_pipeline_gen_data(handle), CptlabStatus::Ok);
        assert_eq!(cptlab_pipeline_score(handle), CptlabStatus::Ok);
        assert_eq!(cptlab_pipeline_mask(handle), CptlabStatus::Ok);
        assert_eq!(cptlab_pipeline_train(handle), CptlabStatus::Ok);
        assert_eq!(cptlab_pipeline_eval(handle), CptlabStatus::Ok);

        let mut forgetting = f64::NAN;
        let mut acquisition = f64::NAN;
        assert_eq!(
            cptlab_pipeline_retention(handle, &mut forgetting, &mut acquisition),
            CptlabStatus::Ok
        );
        assert!(forgetting.is_finite());
        assert!(acquisition.is_finite());

        // mask stats of the emitted artifact
        let mask_path = cstr(dir.path().join("mask.bin").to_str().unwrap());
        let mut json: *mut libc::c_char = ptr::null_mut();
        assert_eq!(
            cptlab_mask_stats_json(mask_path.as_ptr(), &mut json),
            CptlabStatus::Ok
        );
        let parsed: serde_json::Value =
            serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert!(parsed["global_frozen_fraction"].as_f64().unwrap() > 0.0);
        cptlab_string_free(json);

        cptlab_pipeline_free(handle);
    }
}

#[test]
fn missing_artifact_surfaces_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = cstr(dir.path().to_str().unwrap());
    let cfg = smoke_config();

    let mut handle: *mut CptlabPipeline = ptr::null_mut();
    unsafe {
        assert_eq!(
            cptlab_pipeline_new(cfg.as_ptr(), out.as_ptr(), &mut handle),
            CptlabStatus::Ok
        );
        // train before gen-data / score / mask
        assert_eq!(
            cptlab_pipeline_train(handle),
            CptlabStatus::MissingArtifact
        );
        let msg = CStr::from_ptr(cptlab_pipeline_last_error(handle))
            .to_str()
            .unwrap();
        assert!(msg.contains("first"), "{msg}");
        cptlab_pipeline_free(handle);
    }
}

#[test]
fn bad_inputs_yield_error_codes_not_crashes() {
    let mut handle: *mut CptlabPipeline = ptr::null_mut();
    unsafe {
        // null config
        assert_eq!(
            cptlab_pipeline_new(ptr::null(), ptr::null(), &mut handle),
            CptlabStatus::InvalidArg
        );
        // nonexistent config file
        let missing = cstr("/nonexistent/config.toml");
        let out = cstr("/tmp");
        assert_eq!(
            cptlab_pipeline_new(missing.as_ptr(), out.as_ptr(), &mut handle),
            CptlabStatus::Io
        );
        // invalid config contents
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[masking]\nratio = 2.0\n").unwrap();
        let bad_c = cstr(bad.to_str().unwrap());
        assert_eq!(
            cptlab_pipeline_new(bad_c.as_ptr(), out.as_ptr(), &mut handle),
            CptlabStatus::Config
        );
        // stage on a null handle
        assert_eq!(cptlab_pipeline_score(ptr::null_mut()), CptlabStatus::InvalidArg);
        // free(NULL) is a no-op
        cptlab_pipeline_free(ptr::null_mut());
        cptlab_string_free(ptr::null_mut());
    }
}

#[test]
fn generated_header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cptlab.h");
    assert!(header.exists(), "cbindgen header missing");
    let text = std::fs::read_to_string(&header).unwrap();
    for decl in [
        "cptlab_pipeline_new",
        "cptlab_pipeline_train",
        "cptlab_pipeline_last_error",
        "CptlabStatus",
        "CptlabPipeline",
    ] {
        assert!(text.contains(decl), "header missing {decl}");
    }

    // compile (not link) a C translation unit against the header
    let dir = tempfile::tempdir().unwrap();
    let c_file = dir.path().join("use_header.c");
    std::fs::write(
        &c_file,
        format!(
            "#include \"{}\"\nint main(void) {{ return (int)cptlab_version == 0; }}\n",
            header.display()
        ),
    )
    .unwrap();
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-c"])
        .arg(&c_file)
        .arg("-o")
        .arg(dir.path().join("use_header.o"))
        .status()
        .expect("cc available");
    assert!(status.success(), "header does not compile as C99");
}
