//! C ABI over the crnet toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! and released by the matching `*_free`. Every fallible call returns a
//! [`CrnetStatus`]; on failure the message is available from
//! [`crnet_last_error_message`] until the next failing call on the same thread.
//! Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use crnet::engine::data::stream_offsets;
use crnet::engine::metrics::detect;
use crnet::engine::{Checkpoint, Dataset, TrainConfig};
use crnet::evidential::dirichlet_stats;
use crnet::imaging::{Annotation, Domain, Image};
use crnet::io::{read_json, LabeledImage};
use crnet::scatter::{emd_exact, extract_scatter_set, scatter_distance, ScatterSet};
use crnet::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    NonFinite = 5,
    OracleScale = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> CrnetStatus {
    match e {
        Error::Io(_) => CrnetStatus::Io,
        Error::Parse(_) | Error::Json(_) => CrnetStatus::Parse,
        Error::NonFinite(_) => CrnetStatus::NonFinite,
        Error::OracleScale { .. } => CrnetStatus::OracleScale,
        _ => CrnetStatus::InvalidArgument,
    }
}

fn fail(status: CrnetStatus, msg: impl Into<String>) -> CrnetStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), CrnetStatus>) -> CrnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CrnetStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(CrnetStatus::Internal, "internal panic"),
    }
}

fn lift<T>(r: crnet::Result<T>) -> Result<T, CrnetStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), CrnetStatus> {
    if p.is_null() {
        Err(fail(CrnetStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failure on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn crnet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn crnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque weighted scattering point set.
pub struct CrnetScatterSet(ScatterSet);

/// Opaque trained detector.
pub struct CrnetModel {
    config: TrainConfig,
    params: crnet::diffcore::ParamSet,
}

/// One detection in image pixel coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrnetDetection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

/// Builds a set from `n` points (`xy` holds `2n` coordinates) and intensities.
///
/// # Safety
/// `xy` must point to `2n` doubles, `intensities` to `n` doubles, `out` to a
/// writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn crnet_scatter_set_new(
    xy: *const f64,
    intensities: *const f64,
    n: usize,
    out: *mut *mut CrnetScatterSet,
) -> CrnetStatus {
    guard(|| {
        non_null(xy, "xy")?;
        non_null(intensities, "intensities")?;
        non_null(out, "out")?;
        let xy = std::slice::from_raw_parts(xy, 2 * n);
        let a = std::slice::from_raw_parts(intensities, n).to_vec();
        let pts = xy.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let set = lift(ScatterSet::new(pts, a))?;
        *out = Box::into_raw(Box::new(CrnetScatterSet(set)));
        Ok(())
    })
}

/// Extracts the scattering points of a row-major `width × height` intensity patch.
///
/// # Safety
/// `pixels` must point to `width * height` doubles and `out` to a writable slot.
#[no_mangle]
pub unsafe extern "C" fn crnet_scatter_set_from_patch(
    pixels: *const f64,
    width: usize,
    height: usize,
    out: *mut *mut CrnetScatterSet,
) -> CrnetStatus {
    guard(|| {
        non_null(pixels, "pixels")?;
        non_null(out, "out")?;
        let img = image_from(pixels, width, height)?;
        let set = lift(extract_scatter_set(&img))?;
        *out = Box::into_raw(Box::new(CrnetScatterSet(set)));
        Ok(())
    })
}

/// Number of points in the set (0 for null).
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn crnet_scatter_set_len(set: *const CrnetScatterSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `set` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn crnet_scatter_set_free(set: *mut CrnetScatterSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Scattering-structure distance: exact EMD at oracle scale, Sinkhorn beyond.
///
/// # Safety
/// `a` and `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn crnet_scatter_distance(
    a: *const CrnetScatterSet,
    b: *const CrnetScatterSet,
    out: *mut f64,
) -> CrnetStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        *out = lift(scatter_distance(&(*a).0, &(*b).0))?;
        Ok(())
    })
}

/// Exact EMD; fails with `OracleScale` above the exact solver limit.
///
/// # Safety
/// `a` and `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn crnet_emd_exact(
    a: *const CrnetScatterSet,
    b: *const CrnetScatterSet,
    out: *mut f64,
) -> CrnetStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        *out = lift(emd_exact(&(*a).0, &(*b).0))?.0;
        Ok(())
    })
}

/// Dirichlet opinion of `classes` evidence values: beliefs into `belief`
/// (`classes` doubles) and the uncertainty mass into `uncertainty`.
///
/// # Safety
/// `evidence` and `belief` must hold `classes` doubles; `uncertainty` writable.
#[no_mangle]
pub unsafe extern "C" fn crnet_dirichlet_opinion(
    evidence: *const f64,
    classes: usize,
    belief: *mut f64,
    uncertainty: *mut f64,
) -> CrnetStatus {
    guard(|| {
        non_null(evidence, "evidence")?;
        non_null(belief, "belief")?;
        non_null(uncertainty, "uncertainty")?;
        let e = std::slice::from_raw_parts(evidence, classes);
        let st = lift(dirichlet_stats(e, classes))?;
        std::slice::from_raw_parts_mut(belief, classes).copy_from_slice(&st.belief);
        *uncertainty = st.uncertainty;
        Ok(())
    })
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, CrnetStatus> {
    non_null(p, "path")?;
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(CrnetStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn image_from(
    pixels: *const f64,
    width: usize,
    height: usize,
) -> Result<Image, CrnetStatus> {
    if width == 0 || height == 0 {
        return Err(fail(
            CrnetStatus::InvalidArgument,
            "image dimensions must be positive",
        ));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| fail(CrnetStatus::InvalidArgument, "image dimensions overflow"))?;
    Ok(Image {
        width,
        height,
        data: std::slice::from_raw_parts(pixels, n).to_vec(),
    })
}

/// Loads a `checkpoint.json` written by `crnet train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn crnet_model_load(
    path: *const c_char,
    out: *mut *mut CrnetModel,
) -> CrnetStatus {
    guard(|| {
        let path = path_arg(path)?;
        non_null(out, "out")?;
        let ck: Checkpoint = lift(read_json(path))?;
        *out = Box::into_raw(Box::new(CrnetModel {
            config: ck.config,
            params: ck.params,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn crnet_model_free(model: *mut CrnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Detects targets in a row-major intensity image. Writes up to `capacity`
/// detections (highest score first) and always sets `count` to the total;
/// returns `BufferTooSmall` when `capacity < count`.
///
/// # Safety
/// `pixels` must hold `width * height` doubles, `dets` `capacity` entries
/// (may be null when `capacity` is 0), `count` writable.
#[no_mangle]
pub unsafe extern "C" fn crnet_model_detect(
    model: *const CrnetModel,
    pixels: *const f64,
    width: usize,
    height: usize,
    dets: *mut CrnetDetection,
    capacity: usize,
    count: *mut usize,
) -> CrnetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(pixels, "pixels")?;
        non_null(count, "count")?;
        if capacity > 0 {
            non_null(dets, "dets")?;
        }
        let m = &*model;
        let img = image_from(pixels, width, height)?;
        let item = LabeledImage {
            id: "ffi".into(),
            image: img,
            annotation: Annotation::default(),
            domain: Domain::Target,
            resolution_factor: 1.0,
        };
        let data = lift(Dataset::prepare(
            std::slice::from_ref(&item),
            &m.config,
            stream_offsets::EVAL,
        ))?;
        let mut found = lift(detect(&m.params, &m.config, &data))?;
        found.retain(|d| d.score >= m.config.score_threshold);
        found.sort_by(|a, b| b.score.total_cmp(&a.score));
        *count = found.len();
        for (k, d) in found.iter().take(capacity).enumerate() {
            *dets.add(k) = CrnetDetection {
                x: d.bbox.x,
                y: d.bbox.y,
                w: d.bbox.w,
                h: d.bbox.h,
                score: d.score,
            };
        }
        if capacity < found.len() {
            return Err(fail(
                CrnetStatus::BufferTooSmall,
                format!("{} detections, capacity {capacity}", found.len()),
            ));
        }
        Ok(())
    })
}
