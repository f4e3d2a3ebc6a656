//! C interface to the topic weight state machine.
//!
//! A `ToremiReweighter` owns a weight table and the accumulator of the open
//! interval. Every function returns a `ToremiStatus`; on failure
//! `toremi_last_error_message` describes the error of the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use toremi::reweight::ReweightError;
use toremi::{
    stage_for_step, BelowAverageMode, IntervalAccumulator, ReweighterConfig, Stage, TopicLabel, TopicWeightTable,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToremiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidConfig = 4,
    NonFiniteLoss = 5,
    EmptyInterval = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToremiStage {
    Stage1 = 1,
    Stage2 = 2,
}

impl From<Stage> for ToremiStage {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Stage1 => ToremiStage::Stage1,
            Stage::Stage2 => ToremiStage::Stage2,
        }
    }
}

/// Reweighter settings. `literal_below_average` selects the signed Stage-2
/// update for topics at or below the average loss (0 = magnitude).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToremiConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub interval_steps: u64,
    pub transition_step: u64,
    pub literal_below_average: i32,
}

impl From<&ToremiConfig> for ReweighterConfig {
    fn from(c: &ToremiConfig) -> Self {
        ReweighterConfig {
            alpha: c.alpha,
            beta: c.beta,
            gamma: c.gamma,
            interval_steps: c.interval_steps,
            transition_step: c.transition_step,
            stage2_below_average_mode: if c.literal_below_average != 0 {
                BelowAverageMode::Literal
            } else {
                BelowAverageMode::Magnitude
            },
        }
    }
}

/// Opaque handle.
pub struct ToremiReweighter {
    config: ReweighterConfig,
    table: TopicWeightTable,
    acc: IntervalAccumulator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Error(ToremiStatus, String);

impl From<ReweightError> for Error {
    fn from(e: ReweightError) -> Self {
        let status = match e {
            ReweightError::InvalidConfig(_) => ToremiStatus::InvalidConfig,
            ReweightError::NonFiniteLoss { .. } | ReweightError::NonFiniteLabelLoss { .. } => {
                ToremiStatus::NonFiniteLoss
            }
            ReweightError::EmptyInterval | ReweightError::NoLabelLosses => ToremiStatus::EmptyInterval,
            _ => ToremiStatus::InvalidArgument,
        };
        Error(status, e.to_string())
    }
}

fn set_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

fn guard(f: impl FnOnce() -> Result<(), Error>) -> ToremiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ToremiStatus::Ok
        }
        Ok(Err(Error(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ToremiStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Error> {
    // SAFETY: callers pass pointers obtained from this library or valid for reads
    unsafe { p.as_ref() }.ok_or_else(|| Error(ToremiStatus::NullPointer, format!("{what} is NULL")))
}

fn non_null_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Error> {
    // SAFETY: as above, plus exclusive access for the duration of the call
    unsafe { p.as_mut() }.ok_or_else(|| Error(ToremiStatus::NullPointer, format!("{what} is NULL")))
}

fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Error> {
    if p.is_null() {
        return Err(Error(ToremiStatus::NullPointer, format!("{what} is NULL")));
    }
    // SAFETY: non-null, and the caller guarantees NUL termination
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Error(ToremiStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn labels_from(labels: *const *const c_char, n_labels: usize) -> Result<Vec<TopicLabel>, Error> {
    if n_labels == 0 {
        return Ok(Vec::new());
    }
    if labels.is_null() {
        return Err(Error(ToremiStatus::NullPointer, "labels is NULL".into()));
    }
    // SAFETY: the caller provides an array of n_labels pointers
    let raw = unsafe { std::slice::from_raw_parts(labels, n_labels) };
    raw.iter()
        .enumerate()
        .map(|(i, &p)| {
            let s = c_str(p, &format!("labels[{i}]"))?;
            TopicLabel::new(s).map_err(Error::from)
        })
        .collect()
}

/// The default settings: alpha 1, beta 5, gamma 0.1, intervals of 100 steps,
/// transition at step 4000.
#[no_mangle]
pub extern "C" fn toremi_config_default() -> ToremiConfig {
    let c = ReweighterConfig::default();
    ToremiConfig {
        alpha: c.alpha,
        beta: c.beta,
        gamma: c.gamma,
        interval_steps: c.interval_steps,
        transition_step: c.transition_step,
        literal_below_average: 0,
    }
}

/// Creates a reweighter. On success `*out` owns a handle to release with
/// `toremi_reweighter_free`.
///
/// # Safety
/// `config` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn toremi_reweighter_new(config: *const ToremiConfig, out: *mut *mut ToremiReweighter) -> ToremiStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        *out = ptr::null_mut();
        let config = ReweighterConfig::from(non_null(config, "config")?);
        config.validate()?;
        *out = Box::into_raw(Box::new(ToremiReweighter {
            config,
            table: TopicWeightTable::new(),
            acc: IntervalAccumulator::new(),
        }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `handle` must come from `toremi_reweighter_new` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn toremi_reweighter_free(handle: *mut ToremiReweighter) {
    if !handle.is_null() {
        // SAFETY: ownership returns from the caller
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Adds one sample's raw loss to the open interval.
///
/// # Safety
/// `sample_id` and each of the `n_labels` entries of `labels` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn toremi_record_sample(
    handle: *mut ToremiReweighter,
    sample_id: *const c_char,
    labels: *const *const c_char,
    n_labels: usize,
    raw_loss: f64,
) -> ToremiStatus {
    guard(|| {
        let h = non_null_mut(handle, "handle")?;
        let id = c_str(sample_id, "sample_id")?;
        let labels = labels_from(labels, n_labels)?;
        h.acc.record_sample(id, &labels, raw_loss)?;
        h.table.observe(&labels);
        Ok(())
    })
}

/// Marks the end of a training step.
///
/// # Safety
/// `handle` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn toremi_end_step(handle: *mut ToremiReweighter) -> ToremiStatus {
    guard(|| {
        non_null_mut(handle, "handle")?.acc.end_step();
        Ok(())
    })
}

/// Closes the open interval with the scheduled stage and updates the
/// weights. `out_stage` may be NULL.
///
/// # Safety
/// `handle` must be a live handle; `out_stage` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn toremi_finalize(handle: *mut ToremiReweighter, out_stage: *mut ToremiStage) -> ToremiStatus {
    guard(|| {
        let h = non_null_mut(handle, "handle")?;
        let summary = h.table.finalize_next(&mut h.acc, &h.config)?;
        // SAFETY: NULL or writable per the contract
        if let Some(out) = unsafe { out_stage.as_mut() } {
            *out = summary.stage.into();
        }
        Ok(())
    })
}

/// `min(product of the label weights, beta)` for a sample with `labels`.
///
/// # Safety
/// As for `toremi_record_sample`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn toremi_multiplier(
    handle: *const ToremiReweighter,
    labels: *const *const c_char,
    n_labels: usize,
    out: *mut f64,
) -> ToremiStatus {
    guard(|| {
        let h = non_null(handle, "handle")?;
        let out = non_null_mut(out, "out")?;
        let labels = labels_from(labels, n_labels)?;
        *out = h.table.multiplier(&labels, &h.config);
        Ok(())
    })
}

/// Current weight of `label`; 1 for labels never seen.
///
/// # Safety
/// `label` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn toremi_weight(handle: *const ToremiReweighter, label: *const c_char, out: *mut f64) -> ToremiStatus {
    guard(|| {
        let h = non_null(handle, "handle")?;
        let out = non_null_mut(out, "out")?;
        *out = h.table.weight(c_str(label, "label")?.trim());
        Ok(())
    })
}

/// Number of intervals finalized so far.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn toremi_finalized_intervals(handle: *const ToremiReweighter, out: *mut u64) -> ToremiStatus {
    guard(|| {
        let h = non_null(handle, "handle")?;
        *non_null_mut(out, "out")? = h.table.finalized_intervals();
        Ok(())
    })
}

/// Stage that governs the interval ending at `step`.
///
/// # Safety
/// `config` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn toremi_stage_for_step(config: *const ToremiConfig, step: u64, out: *mut ToremiStage) -> ToremiStatus {
    guard(|| {
        let config = ReweighterConfig::from(non_null(config, "config")?);
        config.validate()?;
        *non_null_mut(out, "out")? = stage_for_step(step, &config).into();
        Ok(())
    })
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn toremi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}
