//! C ABI surface over the caption-pipeline core: opaque handles, integer
//! error codes, and caller-freed strings. The header is generated by
//! cbindgen into `include/capforge.h` at build time.

use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use capforge::corpus::{compute_caption_stats, read_manifest, Manifest};
use capforge::grounding::parse_grounded_caption;
use capforge::rounds::detect_saturation;
use capforge::spatialqa::{project_box, CameraIntrinsics, Object3D, SpatialError};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// File could not be read or parsed.
    IoOrParse = 3,
    /// Input values were out of the function's domain.
    InvalidInput = 4,
    /// Projection: every corner sits behind the camera plane.
    BehindCamera = 5,
    /// Projection: visible area after clipping is under one pixel.
    OffScreen = 6,
    /// An index argument was out of range.
    OutOfRange = 7,
}

/// Opaque handle to a loaded manifest.
pub struct CfManifest {
    inner: Manifest,
}

/// Caption word statistics for one round of a manifest.
#[repr(C)]
pub struct CfCaptionStats {
    pub count: u64,
    pub mean_words: f64,
    pub std_words: f64,
    pub failed: u64,
}

/// Axis-aligned projected box in pixel coordinates.
#[repr(C)]
pub struct CfBBox {
    pub xmin: i32,
    pub ymin: i32,
    pub xmax: i32,
    pub ymax: i32,
}

/// Pinhole camera intrinsics and image size.
#[repr(C)]
pub struct CfCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, CfStatus> {
    if ptr.is_null() {
        return Err(CfStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| CfStatus::InvalidUtf8)
}

fn status_err(s: CfStatus) -> CfStatus {
    s
}

/// Detects the saturation round of a positive growth-statistic series.
///
/// Writes the saturation round to `out_round`, or -1 when the series has
/// not saturated. `series` must contain `len` finite positive values.
///
/// # Safety
/// `series` must point to `len` readable doubles; `out_round` must be a
/// valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_detect_saturation(
    series: *const f64,
    len: usize,
    epsilon: f64,
    min_rounds_before_check: usize,
    out_round: *mut i64,
) -> CfStatus {
    if (series.is_null() && len > 0) || out_round.is_null() {
        return CfStatus::NullArgument;
    }
    let slice = if len == 0 {
        &[][..]
    } else {
        std::slice::from_raw_parts(series, len)
    };
    match detect_saturation(slice, epsilon, min_rounds_before_check) {
        Ok(Some(round)) => {
            *out_round = round as i64;
            CfStatus::Ok
        }
        Ok(None) => {
            *out_round = -1;
            CfStatus::Ok
        }
        Err(_) => CfStatus::InvalidInput,
    }
}

/// Projects a yaw-rotated 3D box onto the image plane and clips it.
///
/// `center` and `size` are 3-element arrays (meters, camera frame). On
/// success the rounded, clipped pixel box is written to `out_bbox`.
///
/// # Safety
/// `center` and `size` must each point to 3 readable doubles; `camera` and
/// `out_bbox` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cf_project_box(
    center: *const f64,
    size: *const f64,
    yaw: f64,
    camera: *const CfCamera,
    z_near: f64,
    out_bbox: *mut CfBBox,
) -> CfStatus {
    if center.is_null() || size.is_null() || camera.is_null() || out_bbox.is_null() {
        return CfStatus::NullArgument;
    }
    let c = std::slice::from_raw_parts(center, 3);
    let s = std::slice::from_raw_parts(size, 3);
    let cam = &*camera;
    let obj = Object3D {
        object_id: String::new(),
        category: String::new(),
        center: [c[0], c[1], c[2]],
        size: [s[0], s[1], s[2]],
        yaw,
    };
    let intr = CameraIntrinsics {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        width: cam.width,
        height: cam.height,
    };
    match project_box(&obj, &intr, z_near) {
        Ok(b) => {
            *out_bbox = CfBBox {
                xmin: b.xmin,
                ymin: b.ymin,
                xmax: b.xmax,
                ymax: b.ymax,
            };
            CfStatus::Ok
        }
        Err(SpatialError::BehindCamera) => CfStatus::BehindCamera,
        Err(SpatialError::OffScreen) => CfStatus::OffScreen,
        Err(_) => CfStatus::InvalidInput,
    }
}

/// Opens a manifest JSONL file (with its lineage sidecar) into a handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_handle` must be valid.
/// The handle must be released with `cf_manifest_free`.
#[no_mangle]
pub unsafe extern "C" fn cf_manifest_open(
    path: *const c_char,
    out_handle: *mut *mut CfManifest,
) -> CfStatus {
    if out_handle.is_null() {
        return CfStatus::NullArgument;
    }
    *out_handle = ptr::null_mut();
    let path = match cstr_arg(path) {
        Ok(p) => p,
        Err(s) => return status_err(s),
    };
    match read_manifest(Path::new(path)) {
        Ok(m) => {
            *out_handle = Box::into_raw(Box::new(CfManifest { inner: m }));
            CfStatus::Ok
        }
        Err(_) => CfStatus::IoOrParse,
    }
}

/// Number of records in the manifest.
///
/// # Safety
/// `handle` must come from `cf_manifest_open` and not yet be freed.
#[no_mangle]
pub unsafe extern "C" fn cf_manifest_len(handle: *const CfManifest) -> usize {
    if handle.is_null() {
        return 0;
    }
    (*handle).inner.records.len()
}

/// Returns the id of the record at `index` as a caller-freed string.
///
/// # Safety
/// `handle` must be live; `out_id` must be valid. Free the result with
/// `cf_string_free`.
#[no_mangle]
pub unsafe extern "C" fn cf_manifest_record_id(
    handle: *const CfManifest,
    index: usize,
    out_id: *mut *mut c_char,
) -> CfStatus {
    if handle.is_null() || out_id.is_null() {
        return CfStatus::NullArgument;
    }
    let m = &(*handle).inner;
    match m.records.get(index) {
        Some(r) => {
            *out_id = CString::new(r.id.clone()).expect("no NULs in ids").into_raw();
            CfStatus::Ok
        }
        None => CfStatus::OutOfRange,
    }
}

/// Caption statistics for the manifest at `round`.
///
/// # Safety
/// `handle` must be live; `out_stats` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_manifest_caption_stats(
    handle: *const CfManifest,
    round: u32,
    out_stats: *mut CfCaptionStats,
) -> CfStatus {
    if handle.is_null() || out_stats.is_null() {
        return CfStatus::NullArgument;
    }
    match compute_caption_stats(&(*handle).inner, round) {
        Ok(s) => {
            *out_stats = CfCaptionStats {
                count: s.count,
                mean_words: s.mean_words,
                std_words: s.std_words,
                failed: s.failed,
            };
            CfStatus::Ok
        }
        Err(_) => CfStatus::InvalidInput,
    }
}

/// Releases a manifest handle. Passing null is a no-op.
///
/// # Safety
/// `handle` must come from `cf_manifest_open` and be freed at most once.
#[no_mangle]
pub unsafe extern "C" fn cf_manifest_free(handle: *mut CfManifest) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Counts grounded spans in a caption: valid `[x1,y1,x2,y2]`-bound spans
/// go to `out_valid`, malformed or out-of-bounds ones to `out_dropped`.
///
/// # Safety
/// `text` must be NUL-terminated; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_count_grounded_spans(
    text: *const c_char,
    width: u32,
    height: u32,
    out_valid: *mut usize,
    out_dropped: *mut usize,
) -> CfStatus {
    if out_valid.is_null() || out_dropped.is_null() {
        return CfStatus::NullArgument;
    }
    let text = match cstr_arg(text) {
        Ok(t) => t,
        Err(s) => return status_err(s),
    };
    let parsed = parse_grounded_caption(text, width, height);
    *out_valid = parsed.spans.len();
    *out_dropped = parsed.dropped;
    CfStatus::Ok
}

/// Frees a string returned by this library. Passing null is a no-op.
///
/// # Safety
/// `s` must come from a `cf_*` function and be freed at most once.
#[no_mangle]
pub unsafe extern "C" fn cf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    #[test]
    fn saturation_reference_series() {
        let series = [17.1, 101.2, 117.1, 126.77, 125.9];
        let mut out = 0i64;
        let st = unsafe { cf_detect_saturation(series.as_ptr(), series.len(), 0.05, 2, &mut out) };
        assert_eq!(st, CfStatus::Ok);
        assert_eq!(out, 4);
    }

    #[test]
    fn saturation_short_series_is_none() {
        let series = [10.0];
        let mut out = 7i64;
        let st = unsafe { cf_detect_saturation(series.as_ptr(), 1, 0.05, 2, &mut out) };
        assert_eq!(st, CfStatus::Ok);
        assert_eq!(out, -1);
    }

    #[test]
    fn saturation_rejects_nonpositive() {
        let series = [1.0, 0.0];
        let mut out = 0i64;
        let st = unsafe { cf_detect_saturation(series.as_ptr(), 2, 0.05, 2, &mut out) };
        assert_eq!(st, CfStatus::InvalidInput);
    }

    #[test]
    fn project_reference_cube() {
        let cam = CfCamera {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
        };
        let center = [0.0, 0.0, 5.0];
        let size = [1.0, 1.0, 1.0];
        let mut bbox = CfBBox {
            xmin: 0,
            ymin: 0,
            xmax: 0,
            ymax: 0,
        };
        let st = unsafe {
            cf_project_box(center.as_ptr(), size.as_ptr(), 0.0, &cam, 0.01, &mut bbox)
        };
        assert_eq!(st, CfStatus::Ok);
        assert_eq!((bbox.xmin, bbox.ymin, bbox.xmax, bbox.ymax), (39, 39, 61, 61));
    }

    #[test]
    fn project_behind_camera() {
        let cam = CfCamera {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
        };
        let center = [0.0, 0.0, -5.0];
        let size = [1.0, 1.0, 1.0];
        let mut bbox = CfBBox {
            xmin: 0,
            ymin: 0,
            xmax: 0,
            ymax: 0,
        };
        let st = unsafe {
            cf_project_box(center.as_ptr(), size.as_ptr(), 0.0, &cam, 0.01, &mut bbox)
        };
        assert_eq!(st, CfStatus::BehindCamera);
    }

    #[test]
    fn grounded_span_counting() {
        let text = CString::new("A dog [10,10,50,50]. A cat [90,90,10,10].").unwrap();
        let (mut valid, mut dropped) = (0usize, 0usize);
        let st = unsafe {
            cf_count_grounded_spans(text.as_ptr(), 100, 100, &mut valid, &mut dropped)
        };
        assert_eq!(st, CfStatus::Ok);
        assert_eq!(valid, 1);
        assert_eq!(dropped, 1);
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut out = 0i64;
        let st = unsafe { cf_detect_saturation(std::ptr::null(), 3, 0.05, 2, &mut out) };
        assert_eq!(st, CfStatus::NullArgument);
        let st = unsafe { cf_manifest_open(std::ptr::null(), std::ptr::null_mut()) };
        assert_eq!(st, CfStatus::NullArgument);
        unsafe {
            cf_manifest_free(std::ptr::null_mut());
            cf_string_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn manifest_open_missing_file() {
        let path = CString::new("/nonexistent/manifest.jsonl").unwrap();
        let mut handle: *mut CfManifest = std::ptr::null_mut();
        let st = unsafe { cf_manifest_open(path.as_ptr(), &mut handle) };
        assert_eq!(st, CfStatus::IoOrParse);
        assert!(handle.is_null());
    }
}
