//! C ABI over the dirmlab core.
//!
//! Objects cross the boundary as opaque handles that the caller frees with the
//! matching `*_free` function. Every fallible call returns a [`DirmStatus`];
//! on failure the message is kept per thread and read with
//! [`dirm_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dirmlab::decode::{detect, DecodeConfig, Detection};
use dirmlab::geometry::{iou_3d, rotated_iou_bev, Box7};
use dirmlab::model::{Checkpoint, HeadParams};
use dirmlab::runner::RunConfig;
use dirmlab::scene::{generate_frames, load_frames, rasterize_features, save_frames, BevGrid, FeatureSpec, Frame};
use dirmlab::Error;

/// Result of a C API call. Values 2 to 8 match the core error codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirmStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Parse = 3,
    InvalidBox = 4,
    Shape = 5,
    NonFiniteLoss = 6,
    Io = 7,
    Json = 8,
    InvalidArgument = 9,
    OutOfRange = 10,
    Panic = 11,
}

impl From<&Error> for DirmStatus {
    fn from(e: &Error) -> Self {
        match e.code() {
            2 => DirmStatus::Config,
            3 => DirmStatus::Parse,
            4 => DirmStatus::InvalidBox,
            5 => DirmStatus::Shape,
            6 => DirmStatus::NonFiniteLoss,
            7 => DirmStatus::Io,
            _ => DirmStatus::Json,
        }
    }
}

/// A box: center, extents along its own axes, and yaw in radians.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirmBox {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl From<DirmBox> for Box7 {
    fn from(b: DirmBox) -> Self {
        Box7::new(b.x, b.y, b.z, b.l, b.w, b.h, b.theta)
    }
}

impl From<Box7> for DirmBox {
    fn from(b: Box7) -> Self {
        DirmBox {
            x: b.x,
            y: b.y,
            z: b.z,
            l: b.l,
            w: b.w,
            h: b.h,
            theta: b.theta,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirmDetection {
    pub class_id: u32,
    pub bbox: DirmBox,
    pub conf: f64,
    /// Predicted IoU in [0, 1].
    pub iou_pred: f64,
    pub score: f64,
}

impl From<&Detection> for DirmDetection {
    fn from(d: &Detection) -> Self {
        DirmDetection {
            class_id: d.class_id as u32,
            bbox: d.bbox.into(),
            conf: d.conf,
            iou_pred: d.iou_pred,
            score: d.score,
        }
    }
}

/// Opaque list of frames.
pub struct DirmFrames {
    frames: Vec<Frame>,
}

/// Opaque trained head with the grid and decoding settings it was trained for.
pub struct DirmModel {
    params: HeadParams,
    grid: BevGrid,
    spec: FeatureSpec,
    decode: DecodeConfig,
}

/// Opaque detection list of one frame.
pub struct DirmDetections {
    dets: Vec<DirmDetection>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: DirmStatus, msg: impl Into<String>) -> DirmStatus {
    set_error(msg);
    status
}

fn from_error(e: &Error) -> DirmStatus {
    fail(e.into(), e.to_string())
}

/// Clears the last error, runs `f` and converts panics into [`DirmStatus::Panic`].
fn guard(f: impl FnOnce() -> DirmStatus) -> DirmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(DirmStatus::Panic, "internal panic"))
}

/// # Safety
/// `s` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, name: &str) -> Result<&'a str, DirmStatus> {
    if s.is_null() {
        return Err(fail(DirmStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(DirmStatus::InvalidArgument, format!("`{name}` is not valid UTF-8")))
}

fn config_from_text(text: Option<&str>) -> Result<RunConfig, DirmStatus> {
    let cfg = match text {
        Some(t) => RunConfig::parse_text(t),
        None => Ok(RunConfig::default()),
    };
    cfg.and_then(|c| c.validate().map(|()| c)).map_err(|e| from_error(&e))
}

fn box_iou(a: *const DirmBox, b: *const DirmBox, out: *mut f64, f: fn(&Box7, &Box7) -> f64) -> DirmStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(DirmStatus::NullPointer, "box or output pointer is null");
        }
        // SAFETY: checked non-null above; the caller passes valid pointers.
        let (a, b): (Box7, Box7) = unsafe { ((*a).into(), (*b).into()) };
        if !a.is_valid() || !b.is_valid() {
            return fail(DirmStatus::InvalidArgument, "boxes need finite fields and positive extents");
        }
        unsafe { *out = f(&a, &b) };
        DirmStatus::Ok
    })
}

/// Exact rotated bird's-eye-view IoU of two boxes.
///
/// # Safety
/// All pointers are null or valid.
#[no_mangle]
pub unsafe extern "C" fn dirm_iou_bev(a: *const DirmBox, b: *const DirmBox, out: *mut f64) -> DirmStatus {
    box_iou(a, b, out, rotated_iou_bev)
}

/// 3D IoU: BEV intersection times vertical overlap.
///
/// # Safety
/// All pointers are null or valid.
#[no_mangle]
pub unsafe extern "C" fn dirm_iou_3d(a: *const DirmBox, b: *const DirmBox, out: *mut f64) -> DirmStatus {
    box_iou(a, b, out, iou_3d)
}

/// Generates `count` frames with ids `first_id..`. `config` is `key = value`
/// text or null for the defaults.
///
/// # Safety
/// `config` is null or a NUL-terminated string; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn dirm_frames_generate(
    config: *const c_char,
    seed: u64,
    first_id: u64,
    count: usize,
    out: *mut *mut DirmFrames,
) -> DirmStatus {
    guard(|| {
        if out.is_null() {
            return fail(DirmStatus::NullPointer, "`out` is null");
        }
        let text = if config.is_null() {
            None
        } else {
            match str_arg(config, "config") {
                Ok(t) => Some(t),
                Err(s) => return s,
            }
        };
        let cfg = match config_from_text(text) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let frames = generate_frames(&cfg.scene(), seed, first_id, count);
        *out = Box::into_raw(Box::new(DirmFrames { frames }));
        DirmStatus::Ok
    })
}

/// Reads a JSON-lines frame file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn dirm_frames_load(path: *const c_char, out: *mut *mut DirmFrames) -> DirmStatus {
    guard(|| {
        if out.is_null() {
            return fail(DirmStatus::NullPointer, "`out` is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => PathBuf::from(p),
            Err(s) => return s,
        };
        match load_frames(&path) {
            Ok(frames) => {
                *out = Box::into_raw(Box::new(DirmFrames { frames }));
                DirmStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Writes frames as JSON lines.
///
/// # Safety
/// `frames` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dirm_frames_save(frames: *const DirmFrames, path: *const c_char) -> DirmStatus {
    guard(|| {
        let Some(frames) = frames.as_ref() else {
            return fail(DirmStatus::NullPointer, "`frames` is null");
        };
        let path = match str_arg(path, "path") {
            Ok(p) => PathBuf::from(p),
            Err(s) => return s,
        };
        match save_frames(&frames.frames, &path) {
            Ok(()) => DirmStatus::Ok,
            Err(e) => from_error(&e),
        }
    })
}

/// Number of frames; 0 for null.
///
/// # Safety
/// `frames` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dirm_frames_len(frames: *const DirmFrames) -> usize {
    frames.as_ref().map_or(0, |f| f.frames.len())
}

/// Number of ground-truth boxes in frame `index`.
///
/// # Safety
/// `frames` is a live handle; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn dirm_frames_box_count(frames: *const DirmFrames, index: usize, out: *mut usize) -> DirmStatus {
    guard(|| {
        let (Some(frames), false) = (frames.as_ref(), out.is_null()) else {
            return fail(DirmStatus::NullPointer, "`frames` or `out` is null");
        };
        let Some(f) = frames.frames.get(index) else {
            return fail(DirmStatus::OutOfRange, format!("frame index {index} >= {}", frames.frames.len()));
        };
        *out = f.gts.len();
        DirmStatus::Ok
    })
}

/// Ground-truth box `k` of frame `index` and its class.
///
/// # Safety
/// `frames` is a live handle; `bbox` and `class_id` are valid.
#[no_mangle]
pub unsafe extern "C" fn dirm_frames_box(
    frames: *const DirmFrames,
    index: usize,
    k: usize,
    bbox: *mut DirmBox,
    class_id: *mut u32,
) -> DirmStatus {
    guard(|| {
        let (Some(frames), false, false) = (frames.as_ref(), bbox.is_null(), class_id.is_null()) else {
            return fail(DirmStatus::NullPointer, "null argument");
        };
        let Some(gt) = frames.frames.get(index).and_then(|f| f.gts.get(k)) else {
            return fail(DirmStatus::OutOfRange, format!("no box {k} in frame {index}"));
        };
        *bbox = gt.bbox.into();
        *class_id = gt.class_id as u32;
        DirmStatus::Ok
    })
}

/// # Safety
/// `frames` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dirm_frames_free(frames: *mut DirmFrames) {
    if !frames.is_null() {
        drop(Box::from_raw(frames));
    }
}

/// Loads a checkpoint written by `dirmlab train`.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn dirm_model_load(path: *const c_char, out: *mut *mut DirmModel) -> DirmStatus {
    guard(|| {
        if out.is_null() {
            return fail(DirmStatus::NullPointer, "`out` is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => PathBuf::from(p),
            Err(s) => return s,
        };
        let loaded = Checkpoint::load(&path).and_then(|ck| {
            let cfg = RunConfig::parse_text(&ck.config)?;
            let params = ck.to_params()?;
            if params.shape != cfg.head_shape() {
                return Err(Error::shape(
                    "checkpoint head",
                    format!("{:?}", cfg.head_shape()),
                    format!("{:?}", params.shape),
                ));
            }
            Ok(DirmModel {
                params,
                grid: cfg.grid,
                spec: cfg.feature_spec(),
                decode: cfg.decode_config(),
            })
        });
        match loaded {
            Ok(m) => {
                *out = Box::into_raw(Box::new(m));
                DirmStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Runs the head on frame `index` and decodes its detections.
///
/// # Safety
/// `model` and `frames` are live handles; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn dirm_model_detect(
    model: *const DirmModel,
    frames: *const DirmFrames,
    index: usize,
    out: *mut *mut DirmDetections,
) -> DirmStatus {
    guard(|| {
        let (Some(model), Some(frames), false) = (model.as_ref(), frames.as_ref(), out.is_null()) else {
            return fail(DirmStatus::NullPointer, "null argument");
        };
        let Some(frame) = frames.frames.get(index) else {
            return fail(DirmStatus::OutOfRange, format!("frame index {index} >= {}", frames.frames.len()));
        };
        let dets = rasterize_features(frame, &model.grid, &model.spec)
            .and_then(|(x, _)| detect(&model.params, &x, &model.grid, &model.decode));
        match dets {
            Ok(d) => {
                let dets = d.iter().map(DirmDetection::from).collect();
                *out = Box::into_raw(Box::new(DirmDetections { dets }));
                DirmStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dirm_model_free(model: *mut DirmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of detections; 0 for null.
///
/// # Safety
/// `dets` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dirm_detections_len(dets: *const DirmDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.dets.len())
}

/// Copies detection `k` (sorted by descending score) into `out`.
///
/// # Safety
/// `dets` is a live handle; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn dirm_detections_get(
    dets: *const DirmDetections,
    k: usize,
    out: *mut DirmDetection,
) -> DirmStatus {
    guard(|| {
        let (Some(dets), false) = (dets.as_ref(), out.is_null()) else {
            return fail(DirmStatus::NullPointer, "`dets` or `out` is null");
        };
        match dets.dets.get(k) {
            Some(d) => {
                *out = *d;
                DirmStatus::Ok
            }
            None => fail(DirmStatus::OutOfRange, format!("detection index {k} >= {}", dets.dets.len())),
        }
    })
}

/// # Safety
/// `dets` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dirm_detections_free(dets: *mut DirmDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn dirm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dirm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
