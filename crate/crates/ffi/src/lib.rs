//! C ABI over the editroll engine.
//!
//! Models and sessions are opaque handles. Every fallible call returns an
//! [`ErStatus`]; on failure [`er_last_error_message`] describes the cause
//! for the calling thread. A session keeps its model alive, so the model
//! handle may be freed while sessions created from it are still in use.
//!
//! Rolls cross the boundary as row-major `uint8_t` grids, `time_steps *
//! pitch_count` bytes, one byte per cell, nonzero meaning occupied.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use editroll::nn::{load_model, ScorerModel};
use editroll::sampler::{EditSession, EventKind, SamplerConfig, StopReason};
use editroll::{EditEvent, Error, PianoRoll};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Bounds = 5,
    Shape = 6,
    NoLegalEvent = 7,
    StackEmpty = 8,
    Numeric = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErEventKind {
    Add = 0,
    Remove = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErStopReason {
    Budget = 0,
    Stabilized = 1,
}

/// Sampler settings. A negative `max_removals` means unlimited.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErSamplerConfig {
    pub temperature: f64,
    pub max_removals: i64,
    pub max_iterations: u32,
    pub protect_input: bool,
    pub add_only: bool,
    pub seed: u64,
}

impl From<SamplerConfig> for ErSamplerConfig {
    fn from(c: SamplerConfig) -> Self {
        Self {
            temperature: c.temperature,
            max_removals: c.max_removals.map_or(-1, |m| m as i64),
            max_iterations: c.max_iterations.min(u32::MAX as usize) as u32,
            protect_input: c.protect_input,
            add_only: c.add_only,
            seed: c.seed,
        }
    }
}

impl From<ErSamplerConfig> for SamplerConfig {
    fn from(c: ErSamplerConfig) -> Self {
        Self {
            temperature: c.temperature,
            max_removals: usize::try_from(c.max_removals).ok(),
            max_iterations: c.max_iterations as usize,
            protect_input: c.protect_input,
            add_only: c.add_only,
            seed: c.seed,
        }
    }
}

/// A loaded scorer.
pub struct ErModel {
    inner: Arc<ScorerModel>,
}

/// An editing session bound to one model.
pub struct ErSession {
    model: Arc<ScorerModel>,
    session: EditSession,
    config: SamplerConfig,
    rng: ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ErStatus {
    match e {
        Error::Io(_) => ErStatus::Io,
        Error::Format(_) | Error::Version { .. } => ErStatus::Format,
        Error::Bounds { .. } => ErStatus::Bounds,
        Error::Shape(_) => ErStatus::Shape,
        Error::NoLegalEvent => ErStatus::NoLegalEvent,
        Error::StackEmpty(_) => ErStatus::StackEmpty,
        Error::Numeric { .. } => ErStatus::Numeric,
        Error::Config(_) => ErStatus::InvalidArgument,
        _ => ErStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Engine(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Engine(e)
    }
}

/// Run `f`, turning errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ErStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ErStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            ErStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            ErStatus::InvalidArgument
        }
        Ok(Err(Fail::Engine(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            ErStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

fn write_out<T>(out: *mut T, value: T) {
    if !out.is_null() {
        // SAFETY: caller promises a non-null out pointer is valid for writes
        unsafe { out.write(value) };
    }
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn er_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn er_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn er_sampler_config_default() -> ErSamplerConfig {
    SamplerConfig::default().into()
}

/// Load a checkpoint from a NUL-terminated UTF-8 path.
///
/// # Safety
/// `path` must be a valid C string and `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn er_model_load(path: *const c_char, out: *mut *mut ErModel) -> ErStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail::Arg("path is not UTF-8".into()))?;
        let model = load_model(Path::new(path))?;
        out.write(Box::into_raw(Box::new(ErModel { inner: Arc::new(model) })));
        Ok(())
    })
}

/// Grid the model was trained on.
///
/// # Safety
/// `model` must come from [`er_model_load`]; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn er_model_dims(
    model: *const ErModel,
    time_steps: *mut usize,
    pitch_count: *mut usize,
    pitch_offset: *mut u8,
) -> ErStatus {
    guard(|| {
        let c = &deref(model, "model")?.inner.config;
        write_out(time_steps, c.time_steps);
        write_out(pitch_count, c.pitch_count);
        write_out(pitch_offset, c.pitch_offset);
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`er_model_load`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn er_model_free(model: *mut ErModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Start a session on the model's grid. `cells` holds the initial roll
/// (`len` must equal the grid size) or is null for an empty roll.
///
/// # Safety
/// `model` must be live, `cells` valid for `len` reads when non-null, and
/// `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn er_session_new(
    model: *const ErModel,
    cells: *const u8,
    len: usize,
    config: ErSamplerConfig,
    out: *mut *mut ErSession,
) -> ErStatus {
    guard(|| {
        let model = deref(model, "model")?.inner.clone();
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let config = SamplerConfig::from(config);
        config.validate()?;
        let c = &model.config;
        let mut roll = PianoRoll::new(c.time_steps, c.pitch_count, c.pitch_offset)?;
        if !cells.is_null() {
            if len != roll.cell_count() {
                return Err(Fail::Arg(format!("{len} cells given, grid has {}", roll.cell_count())));
            }
            let src = std::slice::from_raw_parts(cells, len);
            for (i, &v) in src.iter().enumerate() {
                if v != 0 {
                    let (t, p) = roll.cell_at(i);
                    roll.set(t, p, true);
                }
            }
        }
        let session = EditSession::new(roll, &config);
        out.write(Box::into_raw(Box::new(ErSession {
            model,
            session,
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })));
        Ok(())
    })
}

/// Sample and apply one model event.
///
/// # Safety
/// `session` must be live; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn er_session_step(
    session: *mut ErSession,
    time: *mut usize,
    pitch: *mut usize,
    kind: *mut ErEventKind,
    logprob: *mut f64,
) -> ErStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let sampled = s.session.step(&*s.model, &s.config, &mut s.rng)?;
        write_out(time, sampled.event.time);
        write_out(pitch, sampled.event.pitch);
        write_out(
            kind,
            if sampled.kind == EventKind::Remove {
                ErEventKind::Remove
            } else {
                ErEventKind::Add
            },
        );
        write_out(logprob, sampled.logprob);
        Ok(())
    })
}

/// Step until the iteration budget runs out or the roll stabilizes.
///
/// # Safety
/// `session` must be live; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn er_session_run(
    session: *mut ErSession,
    stop: *mut ErStopReason,
    steps: *mut usize,
) -> ErStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let outcome = s.session.run(&*s.model, &s.config, &mut s.rng)?;
        write_out(
            stop,
            match outcome.stop {
                StopReason::Budget => ErStopReason::Budget,
                StopReason::Stabilized => ErStopReason::Stabilized,
            },
        );
        write_out(steps, outcome.steps);
        Ok(())
    })
}

/// Toggle a cell as the user. `protect` shields it from model removal when
/// the session protects input.
///
/// # Safety
/// `session` must be live.
#[no_mangle]
pub unsafe extern "C" fn er_session_edit(
    session: *mut ErSession,
    time: usize,
    pitch: usize,
    protect: bool,
) -> ErStatus {
    guard(|| {
        deref_mut(session, "session")?
            .session
            .user_edit(EditEvent::new(time, pitch), protect)?;
        Ok(())
    })
}

/// # Safety
/// `session` must be live; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn er_session_undo(session: *mut ErSession, time: *mut usize, pitch: *mut usize) -> ErStatus {
    guard(|| {
        let e = deref_mut(session, "session")?.session.undo()?;
        write_out(time, e.time);
        write_out(pitch, e.pitch);
        Ok(())
    })
}

/// # Safety
/// `session` must be live; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn er_session_redo(session: *mut ErSession, time: *mut usize, pitch: *mut usize) -> ErStatus {
    guard(|| {
        let e = deref_mut(session, "session")?.session.redo()?;
        write_out(time, e.time);
        write_out(pitch, e.pitch);
        Ok(())
    })
}

/// Copy the current roll into `buf`, which must hold exactly the grid size.
///
/// # Safety
/// `session` must be live and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn er_session_roll(session: *const ErSession, buf: *mut u8, len: usize) -> ErStatus {
    guard(|| {
        let roll = deref(session, "session")?.session.current();
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        if len != roll.cell_count() {
            return Err(Fail::Arg(format!(
                "buffer of {len} bytes, grid has {}",
                roll.cell_count()
            )));
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, &on) in dst.iter_mut().zip(roll.cells()) {
            *d = u8::from(on);
        }
        Ok(())
    })
}

/// Occupied cells in the current roll; 0 for a null session.
///
/// # Safety
/// `session` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn er_session_note_count(session: *const ErSession) -> usize {
    session.as_ref().map_or(0, |s| s.session.current().note_count())
}

/// # Safety
/// `session` must come from [`er_session_new`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn er_session_free(session: *mut ErSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
