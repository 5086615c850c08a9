//! C ABI over `hse-core`: load a taxonomy and a trained checkpoint, then
//! classify RGB pixel buffers. Every fallible call returns an [`HseStatus`];
//! on failure [`hse_last_error`] holds a message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hse_core::config::RunConfig;
use hse_core::data::RgbImage;
use hse_core::model::{argmax, HseModel};
use hse_core::taxonomy::Taxonomy;
use hse_core::training::augment::{augment_sample, AugmentConfig};
use hse_core::HseError;

/// Status codes; 1 to 3 match the exit codes of the `hse` tool.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HseStatus {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
    NullPointer = 4,
    Panic = 5,
}

/// Opaque category tree.
pub struct HseTaxonomy {
    inner: Taxonomy,
}

/// Opaque trained model with its evaluation preprocessing.
pub struct HseClassifier {
    model: HseModel,
    augment: AugmentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &HseError) -> HseStatus {
    match e.exit_code() {
        1 => HseStatus::Usage,
        3 => HseStatus::Numeric,
        _ => HseStatus::Data,
    }
}

fn guard(f: impl FnOnce() -> Result<(), HseStatus>) -> HseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HseStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            HseStatus::Panic
        }
    }
}

fn fail(e: HseError) -> HseStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> HseStatus {
    set_error(format!("{what} is null"));
    HseStatus::NullPointer
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn path_arg(s: *const c_char, what: &str) -> Result<PathBuf, HseStatus> {
    if s.is_null() {
        return Err(null(what));
    }
    match CStr::from_ptr(s).to_str() {
        Ok(p) => Ok(PathBuf::from(p)),
        Err(_) => {
            set_error(format!("{what} is not UTF-8"));
            Err(HseStatus::Usage)
        }
    }
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a taxonomy TSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn hse_taxonomy_load(path: *const c_char, out: *mut *mut HseTaxonomy) -> HseStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let inner = Taxonomy::load(path).map_err(fail)?;
        *out = Box::into_raw(Box::new(HseTaxonomy { inner }));
        Ok(())
    })
}

/// Number of levels; 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live handle from [`hse_taxonomy_load`].
#[no_mangle]
pub unsafe extern "C" fn hse_taxonomy_level_count(t: *const HseTaxonomy) -> usize {
    t.as_ref().map_or(0, |t| t.inner.levels())
}

/// Category count of a 0-based level; 0 if out of range or null.
///
/// # Safety
/// `t` must be null or a live handle from [`hse_taxonomy_load`].
#[no_mangle]
pub unsafe extern "C" fn hse_taxonomy_level_size(t: *const HseTaxonomy, level: usize) -> usize {
    match t.as_ref() {
        Some(t) if level < t.inner.levels() => t.inner.level_size(level),
        _ => 0,
    }
}

/// # Safety
/// `t` must be null or a handle from [`hse_taxonomy_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hse_taxonomy_free(t: *mut HseTaxonomy) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Loads a checkpoint. `config_path` may be null, in which case
/// `<checkpoint>.cfg` is used when present and defaults otherwise.
///
/// # Safety
/// Strings must be NUL-terminated, `taxonomy` a live handle and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hse_classifier_load(
    config_path: *const c_char,
    taxonomy: *const HseTaxonomy,
    checkpoint: *const c_char,
    out: *mut *mut HseClassifier,
) -> HseStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let t = taxonomy.as_ref().ok_or_else(|| null("taxonomy"))?;
        let ckpt = path_arg(checkpoint, "checkpoint")?;
        let cfg_path = if config_path.is_null() {
            let mut side = ckpt.clone().into_os_string();
            side.push(".cfg");
            Some(PathBuf::from(side)).filter(|p| p.exists())
        } else {
            Some(path_arg(config_path, "config_path")?)
        };
        let cfg = match cfg_path {
            Some(p) => RunConfig::load(p).map_err(fail)?,
            None => RunConfig::default(),
        };
        let model = HseModel::load(cfg.model_config(t.inner.level_sizes()), ckpt).map_err(fail)?;
        *out = Box::into_raw(Box::new(HseClassifier {
            model,
            augment: cfg.train.augment,
        }));
        Ok(())
    })
}

/// Number of levels the model predicts; 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle from [`hse_classifier_load`].
#[no_mangle]
pub unsafe extern "C" fn hse_classifier_level_count(m: *const HseClassifier) -> usize {
    m.as_ref().map_or(0, |m| m.model.config.levels())
}

/// Fused scores of every level for one interleaved 8-bit RGB image of
/// `width × height` pixels. Scores are written level after level into
/// `scores`, which must hold the sum of all level sizes; `predictions`
/// (one entry per level) receives the argmax of each level.
///
/// # Safety
/// `rgb` must point to `3·width·height` bytes, `scores` to `scores_len`
/// doubles and `predictions` to `predictions_len` entries.
#[no_mangle]
pub unsafe extern "C" fn hse_classifier_classify(
    m: *const HseClassifier,
    rgb: *const u8,
    width: usize,
    height: usize,
    scores: *mut f64,
    scores_len: usize,
    predictions: *mut usize,
    predictions_len: usize,
) -> HseStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() || scores.is_null() || predictions.is_null() {
            return Err(null("buffer"));
        }
        let sizes = &m.model.config.level_sizes;
        let total: usize = sizes.iter().sum();
        if scores_len < total || predictions_len < sizes.len() {
            set_error(format!(
                "buffers too small: need {total} scores and {} predictions",
                sizes.len()
            ));
            return Err(HseStatus::Usage);
        }
        let len = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| {
                set_error("image size overflows");
                HseStatus::Usage
            })?;
        let image = RgbImage {
            width,
            height,
            pixels: std::slice::from_raw_parts(rgb, len).to_vec(),
        };
        let x = augment_sample(&image.to_tensor(), &m.augment, None).map_err(fail)?;
        let batch = hse_core::tensor::Tensor::stack(&[x]).map_err(fail)?;
        let levels = m.model.predict_scores(&batch).map_err(fail)?;
        let scores = std::slice::from_raw_parts_mut(scores, total);
        let predictions = std::slice::from_raw_parts_mut(predictions, sizes.len());
        let mut at = 0;
        for (i, l) in levels.iter().enumerate() {
            let row = l.fused.data();
            scores[at..at + row.len()].copy_from_slice(row);
            predictions[i] = argmax(row);
            at += row.len();
        }
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from [`hse_classifier_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hse_classifier_free(m: *mut HseClassifier) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
