//! C ABI over the streaming predictor.
//!
//! A `KtfModel` is a loaded checkpoint. A `KtfSession` holds per-user
//! history buffers and is fed with groups of events: reveal the previous
//! group's answers, then predict the new rows. Every call returns a
//! `KtfStatus`; on failure `ktf_last_error_message` describes the error.
//!
//! Content is addressed by the dense content index assigned at prepare
//! time (questions first, then lectures, starting at 1).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use timekt::model::Model;
use timekt::streaming::{apply_reveal, predict_group, Reveal, StreamEvent, StreamGroup, StreamState};
use timekt::training::load_checkpoint;
use timekt::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KtfStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    Stream = 6,
    Panic = 7,
}

/// One incoming row. Answer fields are not part of an event; they
/// arrive later through `ktf_session_reveal`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KtfEvent {
    pub row_id: i64,
    pub user_id: i64,
    pub timestamp: i64,
    pub task_container_id: i64,
    pub content_index: u32,
    /// Nonzero for a lecture.
    pub is_lecture: u8,
    /// Elapsed time of the user's previous question bundle in ms; negative
    /// when unknown.
    pub prior_elapsed_ms: i64,
    /// 0 false, 1 true, negative when unknown.
    pub prior_had_explanation: i32,
}

/// The true answer of an already predicted question.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KtfReveal {
    pub row_id: i64,
    pub user_id: i64,
    /// 0 or 1.
    pub answered_correctly: i32,
    /// Chosen option, 0 to 3.
    pub user_answer: i32,
}

/// A loaded checkpoint.
pub struct KtfModel {
    model: Arc<Model>,
}

/// Per-user histories bound to one model.
pub struct KtfSession {
    model: Arc<Model>,
    state: StreamState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap_or_default());
}

fn status_of(e: &Error) -> KtfStatus {
    match e {
        Error::Config(_) | Error::DigestMismatch { .. } => KtfStatus::Config,
        Error::NonFinite { .. } | Error::UndefinedMetric(_) => KtfStatus::Numeric,
        Error::Io { .. } => KtfStatus::Io,
        Error::Stream(_) => KtfStatus::Stream,
        _ => KtfStatus::Data,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (KtfStatus, String)>) -> KtfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            KtfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            KtfStatus::Panic
        }
    }
}

fn core(e: Error) -> (KtfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (KtfStatus, String) {
    (KtfStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ktf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ktf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ktf_model_load(path: *const c_char, out: *mut *mut KtfModel) -> KtfStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (KtfStatus::Config, "path is not UTF-8".to_string()))?;
        let ckpt = load_checkpoint(Path::new(path)).map_err(core)?;
        *out = Box::into_raw(Box::new(KtfModel {
            model: Arc::new(ckpt.model),
        }));
        Ok(())
    })
}

/// Releases a model; null is ignored. Sessions keep their own reference.
///
/// # Safety
/// `model` must come from `ktf_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ktf_model_free(model: *mut KtfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Copies the model's config digest (64 hex chars plus NUL) into `buf`.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ktf_model_digest(model: *const KtfModel, buf: *mut c_char, len: usize) -> KtfStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let d = model.model.digest();
        if len < d.len() + 1 {
            return Err((KtfStatus::Config, format!("buffer of {len} bytes is too small")));
        }
        std::ptr::copy_nonoverlapping(d.as_ptr().cast(), buf, d.len());
        *buf.add(d.len()) = 0;
        Ok(())
    })
}

/// Creates an empty session keeping at most `window` events per user.
///
/// # Safety
/// `model` must be a live model and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ktf_session_new(
    model: *const KtfModel,
    window: usize,
    out: *mut *mut KtfSession,
) -> KtfStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if window == 0 {
            return Err((KtfStatus::Config, "window must be >= 1".into()));
        }
        *out = Box::into_raw(Box::new(KtfSession {
            model: Arc::clone(&model.model),
            state: StreamState::new(window),
        }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from `ktf_session_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ktf_session_free(session: *mut KtfSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

unsafe fn slice<'a, T>(ptr: *const T, n: usize, what: &str) -> Result<&'a [T], (KtfStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, n))
}

/// Fills in the answers of previously predicted questions.
///
/// # Safety
/// `reveals` must point to `n` values (may be null when `n` is 0).
#[no_mangle]
pub unsafe extern "C" fn ktf_session_reveal(
    session: *mut KtfSession,
    reveals: *const KtfReveal,
    n: usize,
) -> KtfStatus {
    guard(|| {
        let session = session.as_mut().ok_or_else(|| null("session"))?;
        let mut out = Vec::with_capacity(n);
        for r in slice(reveals, n, "reveals")? {
            if !(0..=1).contains(&r.answered_correctly) || !(0..=3).contains(&r.user_answer) {
                return Err((KtfStatus::Data, format!("row {}: answer out of range", r.row_id)));
            }
            out.push(Reveal {
                user_id: r.user_id,
                row_id: r.row_id,
                answered_correctly: r.answered_correctly as u8 + 1,
                user_answer: r.user_answer as u8 + 1,
            });
        }
        apply_reveal(&mut session.state, &out).map_err(core)
    })
}

/// Appends a group of events and writes one probability per question
/// event, in input order, to `probs`. `written` receives the count.
///
/// # Safety
/// `events` must point to `n` values and `probs` to `capacity` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ktf_session_predict(
    session: *mut KtfSession,
    events: *const KtfEvent,
    n: usize,
    probs: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> KtfStatus {
    guard(|| {
        let session = session.as_mut().ok_or_else(|| null("session"))?;
        if written.is_null() {
            return Err(null("written"));
        }
        *written = 0;
        let events = slice(events, n, "events")?;
        let questions = events.iter().filter(|e| e.is_lecture == 0).count();
        if questions > 0 && probs.is_null() {
            return Err(null("probs"));
        }
        if questions > capacity {
            return Err((
                KtfStatus::Config,
                format!("{questions} questions but room for {capacity}"),
            ));
        }
        let rows = events
            .iter()
            .map(|e| StreamEvent {
                row_id: e.row_id,
                user_id: e.user_id,
                timestamp: e.timestamp,
                task_container_id: e.task_container_id,
                content: e.content_index,
                is_lecture: e.is_lecture != 0,
                prior_elapsed: (e.prior_elapsed_ms >= 0).then_some(e.prior_elapsed_ms),
                prior_explanation: match e.prior_had_explanation {
                    0 => 1,
                    1 => 2,
                    _ => 3,
                },
                answered_correctly: 3,
                user_answer: 5,
            })
            .collect();
        let group = StreamGroup {
            group_id: 0,
            rows,
            reveal: Vec::new(),
        };
        let out = predict_group(&mut session.state, &session.model, &group).map_err(core)?;
        for (i, (_, p)) in out.iter().enumerate() {
            *probs.add(i) = *p;
        }
        *written = out.len();
        Ok(())
    })
}

/// Number of events currently buffered for `user_id` (0 if unseen).
///
/// # Safety
/// `session` must be a live session and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ktf_session_history_len(
    session: *const KtfSession,
    user_id: i64,
    out: *mut usize,
) -> KtfStatus {
    guard(|| {
        let session = session.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = session.state.buffers.get(&user_id).map_or(0, |b| b.len());
        Ok(())
    })
}
