//! C interface: load a checkpoint, segment RGB buffers, read attention
//! values, and score predictions.
//!
//! Every function returns a [`DfdamStatus`]. On failure the message is
//! available from [`dfdam_last_error_message`] on the same thread until the
//! next call. Handles are opaque and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dfdam::attention::{AttentionHooks, AttentionRecord};
use dfdam::evaluation::infer::forward_padded;
use dfdam::evaluation::{infer_multiscale_flip, ConfusionMatrix, EvalConfig};
use dfdam::labels::LabelMap;
use dfdam::network::DfDamModel;
use dfdam::params::ParamStore;
use dfdam::training::augment::subtract_mean;
use dfdam::training::{poly_lr, Checkpoint};
use dfdam::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfdamStatus {
    Ok = 0,
    NullArgument = 1,
    /// Bad sizes, labels, configuration or a violated precondition.
    InvalidArgument = 2,
    /// Malformed checkpoint or image bytes.
    Format = 3,
    Io = 4,
    /// Non-finite values during computation.
    Numerical = 5,
    /// Internal failure; the handle involved should be discarded.
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DfdamStatus {
    match e {
        Error::Format { .. } => DfdamStatus::Format,
        Error::Io { .. } => DfdamStatus::Io,
        Error::NonFinite { .. } | Error::Diverged { .. } => DfdamStatus::Numerical,
        _ => DfdamStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DfdamStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DfdamStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("`{what}` is null"));
            DfdamStatus::NullArgument
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            DfdamStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".to_string());
            DfdamStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got != want {
        return Err(Failure::Invalid(format!("`{what}` holds {got} elements, expected {want}")));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dfdam_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// A trained network loaded from a checkpoint.
pub struct DfdamModel {
    model: DfDamModel,
    params: ParamStore,
    mean_rgb: [f64; 3],
}

/// Attention values of one forward pass.
pub struct DfdamAttention {
    record: AttentionRecord,
}

/// Accumulated pixel confusion counts.
pub struct DfdamConfusion {
    cm: ConfusionMatrix,
}

impl DfdamModel {
    /// Interleaved `H×W×3` bytes to a planar `3×H×W` tensor.
    fn image(rgb: &[u8], height: usize, width: usize) -> Result<Tensor, Failure> {
        if height == 0 || width == 0 {
            return Err(Failure::Invalid("image must be non-empty".into()));
        }
        let plane = height * width;
        expect_len(rgb.len(), plane * 3, "rgb")?;
        Ok(Tensor::from_fn([3, height, width], |i| f64::from(rgb[(i % plane) * 3 + i / plane])))
    }
}

/// Loads a checkpoint written by `dfdam train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dfdam_model_load(path: *const c_char, out: *mut *mut DfdamModel) -> DfdamStatus {
    guard(|| {
        let path = CStr::from_ptr(non_null(path, "path")?).to_str().map_err(|_| Failure::Invalid("path is not UTF-8".into()))?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let ck = Checkpoint::load(Path::new(path))?;
        let model = DfDamModel::from_params(&ck.params)?;
        *out = Box::into_raw(Box::new(DfdamModel {
            model,
            params: ck.params,
            mean_rgb: ck.mean_rgb,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dfdam_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dfdam_model_free(model: *mut DfdamModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes predicted by `model`, or 0 when `model` is null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfdam_model_num_classes(model: *const DfdamModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.num_classes)
}

/// Width of the fused feature space (length of each channel weight vector),
/// or 0 when `model` is null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfdam_model_fusion_channels(model: *const DfdamModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.fusion_channels)
}

/// Segments an interleaved RGB image (`height·width·3` bytes, row major)
/// into `labels` (`height·width` bytes).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn dfdam_model_predict(
    model: *const DfdamModel,
    rgb: *const u8,
    rgb_len: usize,
    height: usize,
    width: usize,
    labels: *mut u8,
    labels_len: usize,
) -> DfdamStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let image = DfdamModel::image(slice(rgb, rgb_len, "rgb")?, height, width)?;
        let out = slice_mut(labels, labels_len, "labels")?;
        expect_len(out.len(), height * width, "labels")?;
        let pred = infer_multiscale_flip(&m.model, &m.params, &image, m.mean_rgb, &EvalConfig::single_scale())?;
        out.copy_from_slice(pred.data());
        Ok(())
    })
}

/// Runs one forward pass and keeps its attention values.
///
/// # Safety
/// Buffers must hold the stated number of elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dfdam_model_attention(
    model: *const DfdamModel,
    rgb: *const u8,
    rgb_len: usize,
    height: usize,
    width: usize,
    out: *mut *mut DfdamAttention,
) -> DfdamStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let image = DfdamModel::image(slice(rgb, rgb_len, "rgb")?, height, width)?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let centered = subtract_mean(&image, m.mean_rgb).reshape([1, 3, height, width])?;
        let (_, record) = forward_padded(&m.model, &m.params, &centered, AttentionHooks::NONE)?;
        *out = Box::into_raw(Box::new(DfdamAttention { record }));
        Ok(())
    })
}

/// # Safety
/// `attention` must come from [`dfdam_model_attention`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn dfdam_attention_free(attention: *mut DfdamAttention) {
    if !attention.is_null() {
        drop(Box::from_raw(attention));
    }
}

/// Size of the position confidence map.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dfdam_attention_beta_size(
    attention: *const DfdamAttention,
    height: *mut usize,
    width: *mut usize,
) -> DfdamStatus {
    guard(|| {
        let a = non_null(attention, "attention")?;
        let shape = a.record.beta.shape();
        *height.as_mut().ok_or(Failure::Null("height"))? = shape[2];
        *width.as_mut().ok_or(Failure::Null("width"))? = shape[3];
        Ok(())
    })
}

fn copy_out(src: &[f64], dst: *mut f64, len: usize, what: &'static str) -> Result<(), Failure> {
    // SAFETY: caller guarantees `dst` holds `len` doubles.
    let dst = unsafe { slice_mut(dst, len, what)? };
    expect_len(len, src.len(), what)?;
    dst.copy_from_slice(src);
    Ok(())
}

/// Copies the low-level channel weights (fusion-width doubles).
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dfdam_attention_alpha_low(attention: *const DfdamAttention, out: *mut f64, len: usize) -> DfdamStatus {
    guard(|| copy_out(non_null(attention, "attention")?.record.alpha_low.data(), out, len, "out"))
}

/// Copies the high-level channel weights (fusion-width doubles).
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dfdam_attention_alpha_high(attention: *const DfdamAttention, out: *mut f64, len: usize) -> DfdamStatus {
    guard(|| copy_out(non_null(attention, "attention")?.record.alpha_high.data(), out, len, "out"))
}

/// Copies the position confidence map, row major.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dfdam_attention_beta(attention: *const DfdamAttention, out: *mut f64, len: usize) -> DfdamStatus {
    guard(|| copy_out(non_null(attention, "attention")?.record.beta.data(), out, len, "out"))
}

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dfdam_confusion_new(classes: usize, out: *mut *mut DfdamConfusion) -> DfdamStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        if classes == 0 || classes > 255 {
            return Err(Failure::Invalid(format!("{classes} classes is outside 1..=255")));
        }
        *out = Box::into_raw(Box::new(DfdamConfusion {
            cm: ConfusionMatrix::new(classes),
        }));
        Ok(())
    })
}

/// # Safety
/// `cm` must come from [`dfdam_confusion_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dfdam_confusion_free(cm: *mut DfdamConfusion) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}

/// Adds `len` (prediction, truth) pixel pairs; truth equal to `ignore` is
/// skipped. Nothing is added if any label is out of range.
///
/// # Safety
/// `pred` and `truth` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dfdam_confusion_accumulate(
    cm: *mut DfdamConfusion,
    pred: *const u8,
    truth: *const u8,
    len: usize,
    ignore: u8,
) -> DfdamStatus {
    guard(|| {
        let cm = cm.as_mut().ok_or(Failure::Null("cm"))?;
        if len == 0 {
            return Ok(());
        }
        let pred = LabelMap::single(1, len, slice(pred, len, "pred")?.to_vec())?;
        let truth = LabelMap::single(1, len, slice(truth, len, "truth")?.to_vec())?;
        cm.cm.accumulate(&pred, &truth, ignore)?;
        Ok(())
    })
}

/// Mean IoU over classes that occur in the predictions or the truth.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dfdam_confusion_mean_iou(cm: *const DfdamConfusion, out: *mut f64) -> DfdamStatus {
    guard(|| {
        let cm = non_null(cm, "cm")?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = cm.cm.miou()?.mean;
        Ok(())
    })
}

/// `initial · (1 - iter/max_iter)^power`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dfdam_poly_lr(initial: f64, power: f64, iter: usize, max_iter: usize, out: *mut f64) -> DfdamStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = poly_lr(initial, power, iter, max_iter)?;
        Ok(())
    })
}
