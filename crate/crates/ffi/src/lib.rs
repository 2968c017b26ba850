//! C ABI for embedding the detector runtime in a host application: opaque
//! handles, integer status codes, no exceptions across the boundary.
//!
//! The generated header lives at `include/canids.h`. Typical use:
//!
//! ```c
//! CanidsDetector *det = NULL;
//! if (canids_detector_load("det1.qmlp", &det) != CANIDS_STATUS_OK) { ... }
//! CanidsWindow *win = canids_window_new(4);
//! int8_t feature[40];
//! CanidsStatus s = canids_window_push(win, ts, can_id, payload, dlc,
//!                                     feature, sizeof feature);
//! if (s == CANIDS_STATUS_OK) {
//!     double prob;
//!     canids_detector_score(det, feature, 40, &prob);
//! }
//! ```

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use canids::canlog::{Label, LabeledFrame};
use canids::quant::QuantModel;
use canids::window::{FrameWindow, WindowConfig};

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanidsStatus {
    Ok = 0,
    /// Feature not emitted yet: the window FIFO is still warming up.
    WarmUp = 1,
    NullPointer = 2,
    InvalidArgument = 3,
    Utf8 = 4,
    Io = 5,
    InvalidModel = 6,
    WidthMismatch = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(status: CanidsStatus, message: impl Into<String>) -> CanidsStatus {
    let msg = CString::new(message.into()).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
    status
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Quantized detector handle; thread-safe for concurrent `score` calls.
pub struct CanidsDetector {
    model: QuantModel,
}

/// Sliding-window feature builder; single-threaded.
pub struct CanidsWindow {
    window: FrameWindow,
    width: usize,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn canids_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread, or NULL. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn canids_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map(|s| s.as_ptr()).unwrap_or(ptr::null())
    })
}

/// Loads a quantized model container (`.qmlp`).
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must point to
/// writable storage for one pointer. On success `*out` owns the detector
/// and must be released with [`canids_detector_free`].
#[no_mangle]
pub unsafe extern "C" fn canids_detector_load(
    path: *const c_char,
    out: *mut *mut CanidsDetector,
) -> CanidsStatus {
    clear_error();
    if path.is_null() || out.is_null() {
        return set_error(CanidsStatus::NullPointer, "null path or out pointer");
    }
    let result = catch_unwind(|| {
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => s,
            Err(_) => return Err(set_error(CanidsStatus::Utf8, "path is not valid UTF-8")),
        };
        match QuantModel::load(Path::new(path)) {
            Ok(model) => Ok(Box::into_raw(Box::new(CanidsDetector { model }))),
            Err(e) => Err(set_error(CanidsStatus::InvalidModel, e.to_string())),
        }
    });
    match result {
        Ok(Ok(handle)) => {
            *out = handle;
            CanidsStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => set_error(CanidsStatus::Panic, "panic in canids_detector_load"),
    }
}

/// Releases a detector handle; NULL is a no-op.
///
/// # Safety
/// `detector` must be NULL or a pointer from [`canids_detector_load`] that
/// has not been freed.
#[no_mangle]
pub unsafe extern "C" fn canids_detector_free(detector: *mut CanidsDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Input width the detector expects (feature element count), or 0 on NULL.
///
/// # Safety
/// `detector` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn canids_detector_input_width(detector: *const CanidsDetector) -> usize {
    detector.as_ref().map(|d| d.model.input_width()).unwrap_or(0)
}

/// Scores one feature vector; writes the attack probability to `out_prob`.
///
/// # Safety
/// `feature` must point to `feature_len` readable `int8_t`s; `out_prob`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn canids_detector_score(
    detector: *const CanidsDetector,
    feature: *const i8,
    feature_len: usize,
    out_prob: *mut f64,
) -> CanidsStatus {
    clear_error();
    let Some(detector) = detector.as_ref() else {
        return set_error(CanidsStatus::NullPointer, "null detector");
    };
    if feature.is_null() || out_prob.is_null() {
        return set_error(CanidsStatus::NullPointer, "null feature or out pointer");
    }
    let feature = std::slice::from_raw_parts(feature, feature_len);
    match catch_unwind(AssertUnwindSafe(|| detector.model.qforward(feature))) {
        Ok(Ok(p)) => {
            *out_prob = p;
            CanidsStatus::Ok
        }
        Ok(Err(e)) => set_error(CanidsStatus::WidthMismatch, e.to_string()),
        Err(_) => set_error(CanidsStatus::Panic, "panic in canids_detector_score"),
    }
}

/// Creates a message window of the given depth (the detectors use 4).
/// Returns NULL when `depth` is 0.
#[no_mangle]
pub extern "C" fn canids_window_new(depth: usize) -> *mut CanidsWindow {
    clear_error();
    match WindowConfig::new(depth) {
        Ok(cfg) => Box::into_raw(Box::new(CanidsWindow {
            window: FrameWindow::new(cfg),
            width: cfg.feature_width(),
        })),
        Err(e) => {
            set_error(CanidsStatus::InvalidArgument, e.to_string());
            ptr::null_mut()
        }
    }
}

/// Releases a window handle; NULL is a no-op.
///
/// # Safety
/// `window` must be NULL or a pointer from [`canids_window_new`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn canids_window_free(window: *mut CanidsWindow) {
    if !window.is_null() {
        drop(Box::from_raw(window));
    }
}

/// Feature width (`10 * depth`) emitted by this window, or 0 on NULL.
///
/// # Safety
/// `window` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn canids_window_feature_width(window: *const CanidsWindow) -> usize {
    window.as_ref().map(|w| w.width).unwrap_or(0)
}

/// Clears the window back to the warm-up state.
///
/// # Safety
/// `window` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn canids_window_reset(window: *mut CanidsWindow) -> CanidsStatus {
    match window.as_mut() {
        Some(w) => {
            w.window.reset();
            CanidsStatus::Ok
        }
        None => set_error(CanidsStatus::NullPointer, "null window"),
    }
}

/// Pushes one received frame. Once the FIFO is warm every push writes a
/// feature of `canids_window_feature_width` signed bytes into
/// `out_feature` and returns `Ok`; during warm-up it returns `WarmUp` and
/// writes nothing.
///
/// # Safety
/// `payload` must point to `payload_len` readable bytes (NULL allowed when
/// `payload_len` is 0); `out_feature` must hold `out_capacity` writable
/// `int8_t`s.
#[no_mangle]
pub unsafe extern "C" fn canids_window_push(
    window: *mut CanidsWindow,
    timestamp: f64,
    can_id: u16,
    payload: *const u8,
    payload_len: usize,
    out_feature: *mut i8,
    out_capacity: usize,
) -> CanidsStatus {
    clear_error();
    let Some(state) = window.as_mut() else {
        return set_error(CanidsStatus::NullPointer, "null window");
    };
    if payload.is_null() && payload_len > 0 {
        return set_error(CanidsStatus::NullPointer, "null payload with non-zero length");
    }
    if out_feature.is_null() {
        return set_error(CanidsStatus::NullPointer, "null feature buffer");
    }
    if out_capacity < state.width {
        return set_error(
            CanidsStatus::BufferTooSmall,
            format!("feature buffer holds {out_capacity}, need {}", state.width),
        );
    }
    let payload = if payload_len == 0 {
        Vec::new()
    } else {
        std::slice::from_raw_parts(payload, payload_len).to_vec()
    };
    let frame = match LabeledFrame::new(timestamp, can_id, payload, Label::Normal) {
        Ok(f) => f,
        Err(e) => return set_error(CanidsStatus::InvalidArgument, e.to_string()),
    };
    match state.window.push(&frame) {
        Some(feature) => {
            std::slice::from_raw_parts_mut(out_feature, state.width)
                .copy_from_slice(&feature.values);
            CanidsStatus::Ok
        }
        None => CanidsStatus::WarmUp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use canids::nn::{MlpModel, ModelSpec};
    use canids::quant::{calibrate, quantize, CalibrationSet};
    use canids::window::WindowFeature;
    use std::ffi::CString;

    fn write_detector(dir: &Path) -> std::path::PathBuf {
        let mut spec = ModelSpec::default();
        spec.batchnorm = false;
        spec.dropout_rate = 0.0;
        let model = MlpModel::init(spec, 1).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let windows: Vec<WindowFeature> = (0..64)
            .map(|i| WindowFeature {
                values: (0..40).map(|_| rng.gen()).collect(),
                label: Label::Normal,
                newest_timestamp: i as f64,
            })
            .collect();
        let calib = CalibrationSet::from_windows(&windows, 64).unwrap();
        let scales = calibrate(&model, &calib).unwrap();
        let q = quantize(&model, &scales, None).unwrap();
        let path = dir.join("det.qmlp");
        q.save(&path, canids::container::Provenance::tool()).unwrap();
        path
    }

    #[test]
    fn load_score_free_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_detector(dir.path());
        let cpath = CString::new(path.to_str().unwrap()).unwrap();

        unsafe {
            let mut det: *mut CanidsDetector = ptr::null_mut();
            assert_eq!(canids_detector_load(cpath.as_ptr(), &mut det), CanidsStatus::Ok);
            assert_eq!(canids_detector_input_width(det), 40);

            let win = canids_window_new(4);
            assert!(!win.is_null());
            assert_eq!(canids_window_feature_width(win), 40);

            let mut feature = [0i8; 40];
            let payload = [0x05u8, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6f];
            for i in 0..3 {
                let status = canids_window_push(
                    win,
                    i as f64,
                    0x316,
                    payload.as_ptr(),
                    payload.len(),
                    feature.as_mut_ptr(),
                    feature.len(),
                );
                assert_eq!(status, CanidsStatus::WarmUp);
            }
            let status = canids_window_push(
                win,
                3.0,
                0x316,
                payload.as_ptr(),
                payload.len(),
                feature.as_mut_ptr(),
                feature.len(),
            );
            assert_eq!(status, CanidsStatus::Ok);

            let mut prob = -1.0f64;
            assert_eq!(
                canids_detector_score(det, feature.as_ptr(), feature.len(), &mut prob),
                CanidsStatus::Ok
            );
            assert!((0.0..=1.0).contains(&prob));

            // Same feature through the Rust API must agree bit-for-bit.
            let expect = (*det).model.qforward(&feature).unwrap();
            assert_eq!(prob.to_bits(), expect.to_bits());

            canids_window_free(win);
            canids_detector_free(det);
        }
    }

    #[test]
    fn errors_set_status_and_message() {
        unsafe {
            let mut det: *mut CanidsDetector = ptr::null_mut();
            let missing = CString::new("/nonexistent/model.qmlp").unwrap();
            assert_eq!(
                canids_detector_load(missing.as_ptr(), &mut det),
                CanidsStatus::InvalidModel
            );
            let msg = canids_last_error_message();
            assert!(!msg.is_null());
            assert!(!CStr::from_ptr(msg).to_str().unwrap().is_empty());

            assert_eq!(
                canids_detector_load(ptr::null(), &mut det),
                CanidsStatus::NullPointer
            );
        }
    }

    #[test]
    fn push_validates_arguments() {
        unsafe {
            assert!(canids_window_new(0).is_null());
            let win = canids_window_new(2);
            let mut feature = [0i8; 4];
            // Buffer smaller than 10 * depth.
            let status = canids_window_push(
                win,
                0.0,
                0x130,
                ptr::null(),
                0,
                feature.as_mut_ptr(),
                feature.len(),
            );
            assert_eq!(status, CanidsStatus::BufferTooSmall);

            let mut big = [0i8; 20];
            // Nine payload bytes exceed the CAN limit.
            let bad_payload = [0u8; 9];
            let status = canids_window_push(
                win,
                0.0,
                0x130,
                bad_payload.as_ptr(),
                bad_payload.len(),
                big.as_mut_ptr(),
                big.len(),
            );
            assert_eq!(status, CanidsStatus::InvalidArgument);
            canids_window_free(win);
        }
    }

    #[test]
    fn version_is_nul_terminated() {
        unsafe {
            let v = CStr::from_ptr(canids_version());
            assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
        }
    }
}
