//! C ABI over the dabseg library.
//!
//! Objects cross the boundary as opaque handles created by `*_new` /
//! `*_load` functions and released with the matching `*_free`. Every
//! fallible call returns a [`DabsegStatus`]; the message of the most recent
//! failure on the calling thread is available from
//! [`dabseg_last_error`]. Arrays are row-major `[C, D, H, W]`.
//!
//! Null pointers are rejected with `NullPointer`; any other pointer must be
//! valid for the length the call states, as usual for a C interface.
// The exports are called from C, where `unsafe` has no meaning; pointer
// validity is the documented caller contract above.
#![allow(clippy::not_unsafe_ptr_arg_deref)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dabseg::metrics::{dice_metric, hd95};
use dabseg::motion::{case_seed, degrade_volume, SeverityPreset};
use dabseg::net::DabsegNet;
use dabseg::train::{prepare_case, tiled_predict, Checkpoint, NetPredictor, PatchPredictor};
use dabseg::volume::{
    generate_phantom, load_case, scan_dataset, LabelVolume, Mask, MultiModalVolume, PhantomProfile,
};
use dabseg::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DabsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Data = 7,
    Diverged = 8,
    /// A Rust panic was caught at the boundary.
    Internal = 9,
}

impl From<&Error> for DabsegStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) | Error::Size(_) => DabsegStatus::Shape,
            Error::Io { .. } => DabsegStatus::Io,
            Error::Format(_) | Error::Unsupported(_) | Error::Corruption(_) | Error::Json(_) => {
                DabsegStatus::Format
            }
            Error::Config(_) | Error::Parameter(_) => DabsegStatus::Config,
            Error::Data(_) | Error::InvalidLabel { .. } => DabsegStatus::Data,
            Error::Diverged { .. } => DabsegStatus::Diverged,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("NUL bytes removed"));
}

fn fail(status: DabsegStatus, msg: impl Into<String>) -> DabsegStatus {
    set_error(msg);
    status
}

/// Runs `f`, mapping library errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), DabsegStatus>) -> DabsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DabsegStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(DabsegStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

fn lib<T>(r: dabseg::Result<T>) -> Result<T, DabsegStatus> {
    r.map_err(|e| fail((&e).into(), e.to_string()))
}

fn nonnull<'a, T>(p: *const T, what: &str) -> Result<&'a T, DabsegStatus> {
    // SAFETY: the caller passes either null or a pointer from this library.
    unsafe { p.as_ref() }.ok_or_else(|| fail(DabsegStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, DabsegStatus> {
    // SAFETY: the caller passes either null or a valid, writable location.
    unsafe { p.as_mut() }.ok_or_else(|| fail(DabsegStatus::NullPointer, format!("{what} is null")))
}

fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, DabsegStatus> {
    if p.is_null() {
        return Err(fail(DabsegStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null, and the caller guarantees NUL termination.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        fail(
            DabsegStatus::InvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })
}

fn slice_out<'a, T>(
    p: *mut T,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [T], DabsegStatus> {
    if p.is_null() {
        return Err(fail(DabsegStatus::NullPointer, format!("{what} is null")));
    }
    if len < need {
        return Err(fail(
            DabsegStatus::Shape,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    // SAFETY: non-null and the caller guarantees `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, need) })
}

fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], DabsegStatus> {
    if p.is_null() {
        return Err(fail(DabsegStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and the caller guarantees `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`) and returns the full message length.
#[no_mangle]
pub extern "C" fn dabseg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            // SAFETY: `buf` has room for `len` bytes per the contract above.
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dabseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A multimodal volume with its label map.
pub struct DabsegCase {
    volume: MultiModalVolume,
    labels: LabelVolume,
}

/// Synthesizes a phantom case on a `size^3` grid.
#[no_mangle]
pub extern "C" fn dabseg_phantom_new(
    seed: u64,
    size: usize,
    out: *mut *mut DabsegCase,
) -> DabsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let id = format!("phantom_{seed}");
        let (mut volume, labels) = lib(generate_phantom(
            case_seed(seed, &id, None),
            [size; 3],
            &PhantomProfile::for_size(size),
        ))?;
        volume.case_id = id;
        *out = Box::into_raw(Box::new(DabsegCase { volume, labels }));
        Ok(())
    })
}

/// Loads case `index` (in sorted case-id order) of a dataset directory.
#[no_mangle]
pub extern "C" fn dabseg_case_load(
    root: *const c_char,
    index: usize,
    out: *mut *mut DabsegCase,
) -> DabsegStatus {
    guard(|| {
        let root = c_str(root, "root")?;
        let out = out_ptr(out, "out")?;
        let records = lib(scan_dataset(Path::new(root)))?;
        let record = records.get(index).ok_or_else(|| {
            fail(
                DabsegStatus::InvalidArgument,
                format!("case index {index} of {}", records.len()),
            )
        })?;
        let (volume, labels) = lib(load_case(record))?;
        *out = Box::into_raw(Box::new(DabsegCase { volume, labels }));
        Ok(())
    })
}

/// Releases a case; null is ignored.
#[no_mangle]
pub extern "C" fn dabseg_case_free(case: *mut DabsegCase) {
    if !case.is_null() {
        // SAFETY: created by `Box::into_raw` in this library and freed once.
        drop(unsafe { Box::from_raw(case) });
    }
}

/// Writes the `[D, H, W]` grid size into `dims[0..3]`.
#[no_mangle]
pub extern "C" fn dabseg_case_dims(case: *const DabsegCase, dims: *mut usize) -> DabsegStatus {
    guard(|| {
        let case = nonnull(case, "case")?;
        slice_out(dims, 3, 3, "dims")?.copy_from_slice(&case.volume.dims);
        Ok(())
    })
}

/// Copies the `[4, D, H, W]` intensities (T1, T1ce, T2, FLAIR).
#[no_mangle]
pub extern "C" fn dabseg_case_volume(
    case: *const DabsegCase,
    buf: *mut f64,
    len: usize,
) -> DabsegStatus {
    guard(|| {
        let case = nonnull(case, "case")?;
        slice_out(buf, len, case.volume.data.len(), "buf")?.copy_from_slice(&case.volume.data);
        Ok(())
    })
}

/// Copies the `[D, H, W]` label codes (0, 1, 2, 4).
#[no_mangle]
pub extern "C" fn dabseg_case_labels(
    case: *const DabsegCase,
    buf: *mut u8,
    len: usize,
) -> DabsegStatus {
    guard(|| {
        let case = nonnull(case, "case")?;
        slice_out(buf, len, case.labels.data.len(), "buf")?.copy_from_slice(&case.labels.data);
        Ok(())
    })
}

/// Creates a motion-degraded copy of `case` with a builtin or file preset.
#[no_mangle]
pub extern "C" fn dabseg_case_degrade(
    case: *const DabsegCase,
    preset: *const c_char,
    seed: u64,
    out: *mut *mut DabsegCase,
) -> DabsegStatus {
    guard(|| {
        let case = nonnull(case, "case")?;
        let preset = lib(SeverityPreset::resolve(c_str(preset, "preset")?))?;
        let out = out_ptr(out, "out")?;
        let (volume, _) = lib(degrade_volume(&case.volume, &preset, seed, false))?;
        *out = Box::into_raw(Box::new(DabsegCase {
            volume,
            labels: case.labels.clone(),
        }));
        Ok(())
    })
}

enum AnyNet {
    F32(DabsegNet<f32>),
    F64(DabsegNet<f64>),
}

/// A trained network loaded from a checkpoint.
pub struct DabsegModel {
    net: AnyNet,
    patch: [usize; 3],
}

/// Loads a training checkpoint (`ckpt_<epoch>.bin`).
#[no_mangle]
pub extern "C" fn dabseg_model_load(
    path: *const c_char,
    out: *mut *mut DabsegModel,
) -> DabsegStatus {
    guard(|| {
        let path = Path::new(c_str(path, "path")?);
        let out = out_ptr(out, "out")?;
        let bytes = std::fs::read(path)
            .map_err(|e| fail(DabsegStatus::Io, format!("{}: {e}", path.display())))?;
        let model = match lib(Checkpoint::<f32>::peek_bits(&bytes))? {
            32 => {
                let ck = lib(Checkpoint::<f32>::decode(&bytes))?;
                DabsegModel {
                    patch: lib(ck.config())?.patch_size,
                    net: AnyNet::F32(lib(ck.network())?),
                }
            }
            _ => {
                let ck = lib(Checkpoint::<f64>::decode(&bytes))?;
                DabsegModel {
                    patch: lib(ck.config())?.patch_size,
                    net: AnyNet::F64(lib(ck.network())?),
                }
            }
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a model; null is ignored.
#[no_mangle]
pub extern "C" fn dabseg_model_free(model: *mut DabsegModel) {
    if !model.is_null() {
        // SAFETY: created by `Box::into_raw` in this library and freed once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Writes the model's `[D, H, W]` patch size into `dims[0..3]`.
#[no_mangle]
pub extern "C" fn dabseg_model_patch_size(
    model: *const DabsegModel,
    dims: *mut usize,
) -> DabsegStatus {
    guard(|| {
        let model = nonnull(model, "model")?;
        slice_out(dims, 3, 3, "dims")?.copy_from_slice(&model.patch);
        Ok(())
    })
}

/// Segments a case by non-overlapping tiled inference. `probs` receives
/// `[3, D, H, W]` probabilities in (ET, TC, WT) order.
#[no_mangle]
pub extern "C" fn dabseg_model_segment(
    model: *const DabsegModel,
    case: *const DabsegCase,
    probs: *mut f64,
    len: usize,
) -> DabsegStatus {
    guard(|| {
        let model = nonnull(model, "model")?;
        let case = nonnull(case, "case")?;
        let prepared = lib(prepare_case(&case.volume, None, &case.labels))?;
        let n: usize = prepared.dims.iter().product();
        let out = slice_out(probs, len, 3 * n, "probs")?;
        let predictor: Box<dyn PatchPredictor + '_> = match &model.net {
            AnyNet::F32(net) => Box::new(NetPredictor {
                net,
                patch: model.patch,
            }),
            AnyNet::F64(net) => Box::new(NetPredictor {
                net,
                patch: model.patch,
            }),
        };
        out.copy_from_slice(&lib(tiled_predict(
            predictor.as_ref(),
            &prepared.input,
            prepared.dims,
        ))?);
        Ok(())
    })
}

fn masks(pred: *const u8, gt: *const u8, dims: *const usize) -> Result<(Mask, Mask), DabsegStatus> {
    let d = slice_in(dims, 3, "dims")?;
    let dims = [d[0], d[1], d[2]];
    let n = dims
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .ok_or_else(|| fail(DabsegStatus::Shape, "grid size overflows"))?;
    let to_mask = |p: *const u8, what: &str| -> Result<Mask, DabsegStatus> {
        let v = slice_in(p, n, what)?;
        lib(Mask::new(dims, v.iter().map(|&b| b != 0).collect()))
    };
    Ok((to_mask(pred, "pred")?, to_mask(gt, "gt")?))
}

/// Hard Dice of two `[D, H, W]` masks (nonzero bytes are foreground).
#[no_mangle]
pub extern "C" fn dabseg_dice(
    pred: *const u8,
    gt: *const u8,
    dims: *const usize,
    out: *mut f64,
) -> DabsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (p, g) = masks(pred, gt, dims)?;
        *out = dice_metric(&p, &g);
        Ok(())
    })
}

/// 95th-percentile symmetric surface distance in the units of `spacing`.
#[no_mangle]
pub extern "C" fn dabseg_hd95(
    pred: *const u8,
    gt: *const u8,
    dims: *const usize,
    spacing: *const f64,
    out: *mut f64,
) -> DabsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let s = slice_in(spacing, 3, "spacing")?;
        if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(fail(
                DabsegStatus::InvalidArgument,
                format!("spacing {s:?} must be positive"),
            ));
        }
        let (p, g) = masks(pred, gt, dims)?;
        *out = hd95(&p, &g, [s[0], s[1], s[2]]);
        Ok(())
    })
}
