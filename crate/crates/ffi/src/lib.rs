//! C interface to the loop closure engine.
//!
//! Every function returns an [`LcStatus`]. On failure a message describing
//! the last error on the calling thread is available from
//! [`lc_last_error_message`]. Engines are opaque; create them with
//! [`lc_engine_new`] and release them with [`lc_engine_free`] or
//! [`lc_engine_shutdown`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use loopclosure::ingest::FrameRecord;
use loopclosure::{Descriptor, Engine, EngineConfig, Error, FrameOutcome};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Persistence = 3,
    InvalidInput = 4,
    Internal = 5,
    Panic = 6,
}

/// Opaque engine handle.
pub struct LcEngine {
    engine: Option<Engine>,
}

/// Summary of one processed frame.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LcFrameResult {
    /// Non-zero when the frame had too few features and was skipped.
    pub bad_frame: i32,
    /// Non-zero when a loop closure was accepted.
    pub has_loop: i32,
    pub location: u64,
    pub loop_location: u64,
    /// Non-zero when `highest` is meaningful.
    pub has_highest: i32,
    pub highest: u64,
    pub highest_prob: f64,
    pub p_new: f64,
    pub ptime: f64,
    pub wm_size: usize,
    pub ltm_size: usize,
    pub vocab_size: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> LcStatus {
    match err {
        Error::Config(_) => LcStatus::Config,
        Error::Persistence(_) | Error::Io { .. } => LcStatus::Persistence,
        Error::DimensionMismatch { .. } | Error::InvalidDescriptor(_) => LcStatus::InvalidInput,
        _ => LcStatus::Internal,
    }
}

fn fail(status: LcStatus, msg: impl Into<String>) -> LcStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), (LcStatus, String)>) -> LcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LcStatus::Ok,
        Ok(Err((status, msg))) => fail(status, msg),
        Err(_) => fail(LcStatus::Panic, "panic inside the engine"),
    }
}

fn lift(err: Error) -> (LcStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (LcStatus, String) {
    (LcStatus::NullPointer, format!("{what} is null"))
}

/// Creates an engine.
///
/// `config` is optional `key = value` text; null means defaults. On success
/// `*out` receives a handle owned by the caller.
///
/// # Safety
/// `config` must be null or a valid NUL-terminated string. `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lc_engine_new(config: *const c_char, out: *mut *mut LcEngine) -> LcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = if config.is_null() {
            EngineConfig::default()
        } else {
            let text = CStr::from_ptr(config)
                .to_str()
                .map_err(|_| (LcStatus::Config, "config is not valid UTF-8".to_string()))?;
            EngineConfig::parse(text).map_err(lift)?
        };
        let engine = Engine::new(cfg).map_err(lift)?;
        *out = Box::into_raw(Box::new(LcEngine {
            engine: Some(engine),
        }));
        Ok(())
    })
}

/// Processes one frame of `feature_count` descriptors of `dim` values each.
///
/// `descriptors` holds `feature_count * dim` values row by row. `responses`
/// holds one detector response per feature, or is null for all zeros.
///
/// # Safety
/// `engine` must come from [`lc_engine_new`]. The arrays must hold the
/// stated number of values. `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lc_engine_process(
    engine: *mut LcEngine,
    image_id: u64,
    descriptors: *const f32,
    responses: *const f32,
    feature_count: usize,
    dim: usize,
    out: *mut LcFrameResult,
) -> LcStatus {
    guard(|| {
        let handle = engine.as_mut().ok_or_else(|| null("engine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if feature_count > 0 && descriptors.is_null() {
            return Err(null("descriptors"));
        }
        let engine = handle
            .engine
            .as_mut()
            .ok_or_else(|| (LcStatus::Internal, "engine was shut down".to_string()))?;
        let expected = engine.config().descriptor_dim;
        if dim != expected {
            return Err((
                LcStatus::InvalidInput,
                format!("descriptors have {dim} values, expected {expected}"),
            ));
        }
        let values = if feature_count == 0 {
            &[][..]
        } else {
            let len = feature_count
                .checked_mul(dim)
                .ok_or_else(|| (LcStatus::InvalidInput, "descriptor array too large".to_string()))?;
            std::slice::from_raw_parts(descriptors, len)
        };
        let mut features = Vec::with_capacity(feature_count);
        for i in 0..feature_count {
            let response = if responses.is_null() { 0.0 } else { *responses.add(i) };
            let row = values[i * dim..(i + 1) * dim].to_vec();
            features.push(Descriptor::new(row, response).map_err(lift)?);
        }
        let outcome = engine
            .process(FrameRecord { image_id, features })
            .map_err(lift)?;
        let memory = engine.memory();
        let mut result = LcFrameResult {
            wm_size: memory.wm().len(),
            ltm_size: memory.ltm_ids().len(),
            vocab_size: memory.vocabulary().len(),
            ..LcFrameResult::default()
        };
        match outcome {
            FrameOutcome::Bad(_) => result.bad_frame = 1,
            FrameOutcome::Processed { decision, timing } => {
                result.location = decision.location.0;
                if let Some(id) = decision.accepted {
                    result.has_loop = 1;
                    result.loop_location = id.0;
                }
                if let Some(id) = decision.highest {
                    result.has_highest = 1;
                    result.highest = id.0;
                }
                result.highest_prob = decision.highest_prob;
                result.p_new = decision.p_new;
                result.ptime = timing.ptime;
            }
        }
        *out = result;
        Ok(())
    })
}

/// Writes the number of locations in working memory to `*out`.
///
/// # Safety
/// `engine` must come from [`lc_engine_new`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lc_engine_wm_size(engine: *const LcEngine, out: *mut usize) -> LcStatus {
    guard(|| {
        let handle = engine.as_ref().ok_or_else(|| null("engine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let engine = handle
            .engine
            .as_ref()
            .ok_or_else(|| (LcStatus::Internal, "engine was shut down".to_string()))?;
        *out = engine.memory().wm().len();
        Ok(())
    })
}

/// Flushes pending writes and compacts long-term memory. The handle stays
/// allocated and must still be passed to [`lc_engine_free`]; any other use
/// afterwards fails.
///
/// # Safety
/// `engine` must come from [`lc_engine_new`].
#[no_mangle]
pub unsafe extern "C" fn lc_engine_shutdown(engine: *mut LcEngine) -> LcStatus {
    guard(|| {
        let handle = engine.as_mut().ok_or_else(|| null("engine"))?;
        let engine = handle
            .engine
            .take()
            .ok_or_else(|| (LcStatus::Internal, "engine was shut down".to_string()))?;
        engine.shutdown().map_err(lift)?;
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` must be null or come from [`lc_engine_new`], and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lc_engine_free(engine: *mut LcEngine) {
    if !engine.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(engine))));
    }
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
