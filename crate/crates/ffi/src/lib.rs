//! C ABI over the `mcd` library.
//!
//! Conventions:
//!
//! * every fallible call returns an [`McdStatus`]; on anything but
//!   `MCD_STATUS_OK` a message is available from [`mcd_last_error`] on the
//!   same thread until the next failing call;
//! * objects are opaque handles created by `*_open`/`*_load`/`mcd_train`
//!   and released by the matching `*_free`, which accepts NULL;
//! * strings are NUL-terminated UTF-8; strings returned by the library are
//!   released with [`mcd_string_free`];
//! * panics never cross the boundary; they surface as `MCD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mcd::feature_store::{generate_synthetic_dataset, Dataset, Split, SyntheticSpec};
use mcd::model::Mcd;
use mcd::trainer::{evaluate, fit, load_checkpoint, make_batch, CheckpointIndex, RunConfig};
use mcd::McdError;

pub const MCD_SPLIT_TRAIN: u32 = 0;
pub const MCD_SPLIT_VAL: u32 = 1;
pub const MCD_SPLIT_TEST: u32 = 2;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McdStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Shape = 7,
    EmptySplit = 8,
    OutOfRange = 9,
    NumericalFailure = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// A loaded, validated dataset directory.
pub struct McdDataset {
    inner: Dataset,
}

/// A model together with the run configuration that produced it.
pub struct McdModel {
    model: Mcd,
    config: RunConfig,
}

struct Failure(McdStatus, String);

impl From<McdError> for Failure {
    fn from(e: McdError) -> Self {
        let status = match &e {
            McdError::Io { .. } => McdStatus::Io,
            McdError::Format { .. } | McdError::Json { .. } => McdStatus::Format,
            McdError::InvalidSample { .. } | McdError::Manifest(_) => McdStatus::Format,
            McdError::Config(_) => McdStatus::Config,
            McdError::Shape(_) => McdStatus::Shape,
            McdError::EmptySplit { .. } => McdStatus::EmptySplit,
            McdError::LabelOutOfRange { .. } | McdError::MissingTruth { .. } => McdStatus::OutOfRange,
            McdError::NonFiniteLoss { .. } => McdStatus::NumericalFailure,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> McdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => McdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            McdStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(McdStatus::NullArgument, format!("{what} is NULL"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(McdStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn optional_text<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

fn split(code: u32) -> Result<Split, Failure> {
    match code {
        MCD_SPLIT_TRAIN => Ok(Split::Train),
        MCD_SPLIT_VAL => Ok(Split::Val),
        MCD_SPLIT_TEST => Ok(Split::Test),
        other => Err(Failure(McdStatus::InvalidArgument, format!("unknown split code {other}"))),
    }
}

fn give_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure(McdStatus::Format, e.to_string()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failure on this thread, or NULL. Owned by the
/// library; valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mcd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

const STATUS_NAMES: [(McdStatus, &CStr); 13] = [
    (McdStatus::Ok, c"ok"),
    (McdStatus::NullArgument, c"null argument"),
    (McdStatus::InvalidUtf8, c"invalid utf-8"),
    (McdStatus::InvalidArgument, c"invalid argument"),
    (McdStatus::Io, c"io"),
    (McdStatus::Format, c"format"),
    (McdStatus::Config, c"config"),
    (McdStatus::Shape, c"shape"),
    (McdStatus::EmptySplit, c"empty split"),
    (McdStatus::OutOfRange, c"out of range"),
    (McdStatus::NumericalFailure, c"numerical failure"),
    (McdStatus::BufferTooSmall, c"buffer too small"),
    (McdStatus::Panic, c"panic"),
];

/// Static name of a status code, e.g. `"io"`; `"unknown"` for codes this
/// library never returns. Takes a plain integer so any value is safe.
#[no_mangle]
pub extern "C" fn mcd_status_name(code: u32) -> *const c_char {
    STATUS_NAMES
        .iter()
        .find(|(s, _)| *s as u32 == code)
        .map_or(c"unknown", |(_, n)| n)
        .as_ptr()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mcd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Writes a planted-clue dataset to `out_dir`. `spec_json` holds any subset
/// of the generator fields (`n_samples`, `dim`, `seed`, ...) or is NULL for
/// the defaults.
///
/// # Safety
/// String arguments must be NUL-terminated or NULL where allowed.
#[no_mangle]
pub unsafe extern "C" fn mcd_generate_synthetic(out_dir: *const c_char, spec_json: *const c_char) -> McdStatus {
    guard(|| {
        let dir = PathBuf::from(text(out_dir, "out_dir")?);
        let spec: SyntheticSpec = match optional_text(spec_json, "spec_json")? {
            Some(j) => serde_json::from_str(j).map_err(|e| Failure(McdStatus::Config, format!("spec_json: {e}")))?,
            None => SyntheticSpec::default(),
        };
        generate_synthetic_dataset(&spec, &dir)?;
        Ok(())
    })
}

/// Loads and validates a dataset directory.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mcd_dataset_open(dir: *const c_char, out: *mut *mut McdDataset) -> McdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = Dataset::load(&PathBuf::from(text(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(McdDataset { inner }));
        Ok(())
    })
}

/// Number of samples in one split (`MCD_SPLIT_*`).
///
/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mcd_dataset_split_len(ds: *const McdDataset, split_code: u32, out: *mut usize) -> McdStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ds.inner.split_indices(split(split_code)?).len();
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle from [`mcd_dataset_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mcd_dataset_free(ds: *mut McdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains on the dataset's train split. `config_toml` is a run
/// configuration or NULL for defaults; with a non-NULL `out_dir` the
/// checkpoints and loss trace are written there. Returns the last-epoch model.
///
/// # Safety
/// `ds` must be a live handle, strings NUL-terminated or NULL, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mcd_train(
    ds: *const McdDataset,
    config_toml: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut McdModel,
) -> McdStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let config = match optional_text(config_toml, "config_toml")? {
            Some(t) => RunConfig::from_toml(t)?,
            None => RunConfig::default(),
        };
        let dir = optional_text(out_dir, "out_dir")?.map(PathBuf::from);
        let outcome = fit(&ds.inner, &config, dir.as_deref())?;
        *out = Box::into_raw(Box::new(McdModel {
            model: outcome.last,
            config,
        }));
        Ok(())
    })
}

/// Loads a checkpoint archive.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mcd_model_load(path: *const c_char, out: *mut *mut McdModel) -> McdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, CheckpointIndex { config, .. }) = load_checkpoint(&PathBuf::from(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(McdModel { model, config }));
        Ok(())
    })
}

/// Number of answer classes, i.e. the probability buffer length needed by
/// [`mcd_model_predict`].
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mcd_model_num_answers(model: *const McdModel, out: *mut usize) -> McdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.shape.vocab.answer;
        Ok(())
    })
}

/// Predicts the `position`-th sample of a split. Writes the answer id and,
/// when `probs` is non-NULL, the answer distribution into `probs[0..probs_len]`
/// (`probs_len` must be at least [`mcd_model_num_answers`]).
///
/// # Safety
/// Handles must be live; `answer` writable; `probs` NULL or valid for
/// `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mcd_model_predict(
    model: *const McdModel,
    ds: *const McdDataset,
    split_code: u32,
    position: usize,
    answer: *mut usize,
    probs: *mut f64,
    probs_len: usize,
) -> McdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if answer.is_null() {
            return Err(null("answer"));
        }
        let indices = ds.inner.split_indices(split(split_code)?);
        let &i = indices.get(position).ok_or_else(|| {
            Failure(
                McdStatus::OutOfRange,
                format!("position {position} outside split of {} samples", indices.len()),
            )
        })?;
        let p = m.model.predict_batch(&make_batch(&ds.inner, &[i])?)?.remove(0);
        if !probs.is_null() {
            if probs_len < p.probs.len() {
                return Err(Failure(
                    McdStatus::BufferTooSmall,
                    format!("probs holds {probs_len}, need {}", p.probs.len()),
                ));
            }
            ptr::copy_nonoverlapping(p.probs.as_ptr(), probs, p.probs.len());
        }
        *answer = p.answer_id;
        Ok(())
    })
}

/// Evaluation report for one split as a JSON string; free with
/// [`mcd_string_free`].
///
/// # Safety
/// Handles must be live; `json_out` writable.
#[no_mangle]
pub unsafe extern "C" fn mcd_model_evaluate_json(
    model: *const McdModel,
    ds: *const McdDataset,
    split_code: u32,
    json_out: *mut *mut c_char,
) -> McdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if json_out.is_null() {
            return Err(null("json_out"));
        }
        let report = evaluate(&m.model, &ds.inner, split(split_code)?, &m.config)?;
        give_string(serde_json::to_string(&report).expect("report serializes"), json_out)
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mcd_model_free(model: *mut McdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
