use std::ffi::{CStr, CString};
use std::ptr;

use loopclosure::synth::{generate_world, WorldSpec};
use loopclosure_ffi::*;

fn last_error() -> String {
    let p = lc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_engine(config: &str) -> *mut LcEngine {
    let text = CString::new(config).unwrap();
    let mut engine = ptr::null_mut();
    let status = unsafe { lc_engine_new(text.as_ptr(), &mut engine) };
    assert_eq!(status, LcStatus::Ok, "{}", last_error());
    assert!(!engine.is_null());
    engine
}

const SMALL: &str = "descriptor_dim = 16\nnn_checks = exhaustive\ntime_source = virtual\n";

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(lc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn bad_config_reports_config_status() {
    let text = CString::new("t_loop = 7\n").unwrap();
    let mut engine = ptr::null_mut();
    let status = unsafe { lc_engine_new(text.as_ptr(), &mut engine) };
    assert_eq!(status, LcStatus::Config);
    assert!(engine.is_null());
    assert!(last_error().contains("t_loop"), "{}", last_error());

    let text = CString::new("no_such_key = 1\n").unwrap();
    assert_eq!(unsafe { lc_engine_new(text.as_ptr(), &mut engine) }, LcStatus::Config);
}

#[test]
fn null_arguments_are_rejected() {
    assert_eq!(unsafe { lc_engine_new(ptr::null(), ptr::null_mut()) }, LcStatus::NullPointer);
    let mut out = LcFrameResult::default();
    let status = unsafe { lc_engine_process(ptr::null_mut(), 0, ptr::null(), ptr::null(), 0, 0, &mut out) };
    assert_eq!(status, LcStatus::NullPointer);
    let mut n = 0usize;
    assert_eq!(unsafe { lc_engine_wm_size(ptr::null(), &mut n) }, LcStatus::NullPointer);
    assert_eq!(unsafe { lc_engine_shutdown(ptr::null_mut()) }, LcStatus::NullPointer);
    unsafe { lc_engine_free(ptr::null_mut()) };

    let engine = new_engine(SMALL);
    let status = unsafe { lc_engine_process(engine, 0, ptr::null(), ptr::null(), 3, 16, &mut out) };
    assert_eq!(status, LcStatus::NullPointer);
    unsafe { lc_engine_free(engine) };
}

#[test]
fn wrong_dimension_is_invalid_input() {
    let engine = new_engine(SMALL);
    let values = [0.5f32; 2 * 8];
    let mut out = LcFrameResult::default();
    let status = unsafe { lc_engine_process(engine, 0, values.as_ptr(), ptr::null(), 2, 8, &mut out) };
    assert_eq!(status, LcStatus::InvalidInput, "{}", last_error());
    unsafe { lc_engine_free(engine) };
}

#[test]
fn revisits_are_detected_through_the_c_interface() {
    let spec = WorldSpec {
        place_count: 100,
        traversals: 2,
        descriptor_dim: 16,
        ..WorldSpec::default()
    };
    let world = generate_world(&spec, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = format!("{SMALL}ltm_path = {}\n", dir.path().join("ltm.db").display());
    let engine = new_engine(&config);

    let mut loops = 0;
    let mut last = LcFrameResult::default();
    for frame in &world.frames {
        let dim = 16;
        let values: Vec<f32> = frame.features.iter().flat_map(|d| d.values().to_vec()).collect();
        let responses: Vec<f32> = frame.features.iter().map(|d| d.response()).collect();
        let mut out = LcFrameResult::default();
        let status = unsafe {
            lc_engine_process(
                engine,
                frame.image_id,
                values.as_ptr(),
                responses.as_ptr(),
                frame.features.len(),
                dim,
                &mut out,
            )
        };
        assert_eq!(status, LcStatus::Ok, "{}", last_error());
        assert!(out.p_new >= 0.0 && out.p_new <= 1.0);
        loops += out.has_loop;
        last = out;
    }
    assert!(loops > 0, "no loop closure accepted");

    let mut wm = 0usize;
    assert_eq!(unsafe { lc_engine_wm_size(engine, &mut wm) }, LcStatus::Ok);
    assert_eq!(wm, last.wm_size);

    assert_eq!(unsafe { lc_engine_shutdown(engine) }, LcStatus::Ok);
    assert_eq!(unsafe { lc_engine_shutdown(engine) }, LcStatus::Internal);
    let mut out = LcFrameResult::default();
    let status = unsafe { lc_engine_process(engine, 0, ptr::null(), ptr::null(), 0, 16, &mut out) };
    assert_eq!(status, LcStatus::Internal);
    unsafe { lc_engine_free(engine) };
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/loopclosure.h");
    for name in [
        "lc_engine_new",
        "lc_engine_process",
        "lc_engine_wm_size",
        "lc_engine_shutdown",
        "lc_engine_free",
        "lc_last_error_message",
        "lc_version",
        "LC_STATUS_PERSISTENCE",
        "LcFrameResult",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
