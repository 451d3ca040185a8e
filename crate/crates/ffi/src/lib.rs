//! C ABI over the `m2sformer` crate.
//!
//! Every fallible function returns an [`M2sStatus`]; on failure a message is
//! kept per thread and can be read with [`m2s_last_error`]. Models are opaque
//! handles released with [`m2s_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use m2sformer::backbone::{FeatureMap, ScalePreset};
use m2sformer::checkpoint;
use m2sformer::difficulty::{
    self, CurvatureMode, DifficultyConfig, DifficultyLabel, GlobalPriorMap,
};
use m2sformer::error::Error;
use m2sformer::metrics::{BinaryMask, ConfusionCounts};
use m2sformer::model::{self, M2SFormer, ModelConfig};
use m2sformer::nn::ParamStore;
use m2sformer::tensor::Tensor;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum M2sStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Checkpoint = 5,
    Runtime = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum M2sPreset {
    Toy = 0,
    Full = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum M2sCurvatureMode {
    AsWritten = 0,
    Standard = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum M2sLabel {
    Hard = 0,
    Easy = 1,
}

/// Opaque model handle.
pub struct M2sModel {
    model: M2SFormer,
    params: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> M2sStatus {
    match e {
        Error::Dimension(_) => M2sStatus::Dimension,
        Error::Config(_) | Error::Contract(_) => M2sStatus::InvalidArgument,
        Error::Io { .. } | Error::Image { .. } | Error::MissingFold { .. } => M2sStatus::Io,
        Error::Checkpoint(_) => M2sStatus::Checkpoint,
        Error::NonFinite(_) => M2sStatus::Runtime,
    }
}

struct Fail(M2sStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(M2sStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(M2sStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> M2sStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            M2sStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            M2sStatus::Panic
        }
    }
}

fn preset_of(p: i32) -> Result<ScalePreset, Fail> {
    match p {
        0 => Ok(ScalePreset::Toy),
        1 => Ok(ScalePreset::Full),
        _ => Err(invalid(format!("unknown preset {p}"))),
    }
}

fn label_of(l: DifficultyLabel) -> M2sLabel {
    match l {
        DifficultyLabel::Hard => M2sLabel::Hard,
        DifficultyLabel::Easy => M2sLabel::Easy,
    }
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn m2s_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Learnable parameter count of a preset (`M2sPreset` value).
///
/// # Safety
/// `out` must be a valid pointer to writable memory.
#[no_mangle]
pub unsafe extern "C" fn m2s_count_params(preset: i32, out: *mut u64) -> M2sStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let n = model::count_parameters(&ModelConfig::preset(preset_of(preset)?))?;
        *out = n;
        Ok(())
    })
}

/// Freshly initialized model for a preset (`M2sPreset` value) and seed.
///
/// # Safety
/// `out` must be a valid pointer to writable memory.
#[no_mangle]
pub unsafe extern "C" fn m2s_model_new(
    preset: i32,
    seed: u64,
    out: *mut *mut M2sModel,
) -> M2sStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = M2SFormer::new(&ModelConfig::preset(preset_of(preset)?))?;
        let params = model.init_params(seed)?;
        *out = Box::into_raw(Box::new(M2sModel { model, params }));
        Ok(())
    })
}

/// Load a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn m2s_model_load(path: *const c_char, out: *mut *mut M2sModel) -> M2sStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let (cfg, params) = checkpoint::load(Path::new(path))?;
        let model = M2SFormer::new(&cfg)?;
        model.check_params(&params)?;
        *out = Box::into_raw(Box::new(M2sModel { model, params }));
        Ok(())
    })
}

/// Write a model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn m2s_model_save(model: *const M2sModel, path: *const c_char) -> M2sStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        checkpoint::save(Path::new(path), &m.model.cfg, &m.params)?;
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn m2s_model_free(model: *mut M2sModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Parameter count of a loaded model.
///
/// # Safety
/// `model` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn m2s_model_parameter_count(
    model: *const M2sModel,
    out: *mut u64,
) -> M2sStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.parameter_count();
        Ok(())
    })
}

/// Run the model on a planar RGB image (`3 * height * width` floats in
/// `[0, 1]`, channel-major). Writes `height * width` probabilities to
/// `mask_out`, and the difficulty score and label when those pointers are
/// non-null. Height and width must be multiples of 32.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn m2s_model_predict(
    model: *const M2sModel,
    image: *const f32,
    height: usize,
    width: usize,
    mask_out: *mut f32,
    score_out: *mut f64,
    label_out: *mut M2sLabel,
) -> M2sStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if image.is_null() {
            return Err(null("image"));
        }
        if mask_out.is_null() {
            return Err(null("mask_out"));
        }
        let n = height
            .checked_mul(width)
            .filter(|&n| n > 0)
            .ok_or_else(|| invalid("image dims must be positive"))?;
        let pixels = std::slice::from_raw_parts(image, 3 * n);
        let t = Tensor::new(
            &[3, height, width],
            pixels.iter().map(|&v| v as f64).collect(),
        )?;
        let (mask, _, verdict) = m.model.forward(&FeatureMap::from_tensor(t)?, &m.params)?;
        let out = std::slice::from_raw_parts_mut(mask_out, n);
        for (o, &v) in out.iter_mut().zip(mask.values()) {
            *o = v as f32;
        }
        if !score_out.is_null() {
            *score_out = verdict.score;
        }
        if !label_out.is_null() {
            *label_out = label_of(verdict.label);
        }
        Ok(())
    })
}

/// Difficulty score and label of a row-major `height * width` prior map.
/// `mode` is an `M2sCurvatureMode` value.
///
/// # Safety
/// `prior` must hold `height * width` values; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn m2s_difficulty_score(
    prior: *const f64,
    height: usize,
    width: usize,
    threshold: f64,
    mode: i32,
    score_out: *mut f64,
    label_out: *mut M2sLabel,
) -> M2sStatus {
    guard(|| {
        if prior.is_null() {
            return Err(null("prior"));
        }
        if score_out.is_null() || label_out.is_null() {
            return Err(null("output pointer"));
        }
        let mode = match mode {
            0 => CurvatureMode::AsWritten,
            1 => CurvatureMode::Standard,
            _ => return Err(invalid(format!("unknown curvature mode {mode}"))),
        };
        let n = height
            .checked_mul(width)
            .ok_or_else(|| invalid("prior dims overflow"))?;
        let values = std::slice::from_raw_parts(prior, n).to_vec();
        let map = GlobalPriorMap::from_values(height, width, values)?;
        let cfg = DifficultyConfig {
            threshold,
            mode,
            ..Default::default()
        };
        cfg.validate()?;
        let v = difficulty::assess(&map, &cfg)?;
        *score_out = v.score;
        *label_out = label_of(v.label);
        Ok(())
    })
}

/// Dice and IoU between two binary masks of `len` bytes (nonzero = set).
/// Either output pointer may be null.
///
/// # Safety
/// `pred` and `target` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn m2s_dice_iou(
    pred: *const u8,
    target: *const u8,
    len: usize,
    dsc_out: *mut f64,
    iou_out: *mut f64,
) -> M2sStatus {
    guard(|| {
        if pred.is_null() || target.is_null() {
            return Err(null("mask"));
        }
        let bits = |p: *const u8| {
            std::slice::from_raw_parts(p, len)
                .iter()
                .map(|&b| b != 0)
                .collect()
        };
        let a = BinaryMask::new(1, len, bits(pred))?;
        let b = BinaryMask::new(1, len, bits(target))?;
        let c = ConfusionCounts::between(&a, &b)?;
        if !dsc_out.is_null() {
            *dsc_out = c.dsc();
        }
        if !iou_out.is_null() {
            *iou_out = c.iou();
        }
        Ok(())
    })
}
