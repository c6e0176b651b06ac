//! C ABI for enhancement and scoring.
//!
//! Every function returns a [`PdpcrnStatus`]; results come back through out
//! parameters. On failure the message is available from
//! [`pdpcrn_last_error`] on the same thread until the next call. Audio is
//! planar `float`: channel `c` occupies `samples[c * frames .. (c + 1) * frames]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pdpcrn::io::Checkpoint;
use pdpcrn::metrics::{si_sdr, stoi, Enhancer};
use pdpcrn::models::{Model, ModelConfig};
use pdpcrn::nn::ParamStore;
use pdpcrn::signal::{MultichannelWave, SAMPLE_RATE};
use pdpcrn::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdpcrnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    Numeric = 7,
    Internal = 8,
}

impl From<&Error> for PdpcrnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => PdpcrnStatus::Shape,
            Error::InvalidArgument(_) => PdpcrnStatus::InvalidArgument,
            Error::Config(_) => PdpcrnStatus::Config,
            Error::Io { .. } => PdpcrnStatus::Io,
            Error::Format { .. } => PdpcrnStatus::Format,
            Error::Numeric(_) => PdpcrnStatus::Numeric,
            Error::Autograd(_) => PdpcrnStatus::Internal,
        }
    }
}

/// Opaque network handle: a model and its parameters.
pub struct PdpcrnModel {
    model: Model,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PdpcrnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PdpcrnStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PdpcrnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PdpcrnStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal error: {msg}"));
            PdpcrnStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            PdpcrnStatus::InvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })
}

unsafe fn slice_arg<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pdpcrn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pdpcrn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdpcrn_model_load(
    path: *const c_char,
    out: *mut *mut PdpcrnModel,
) -> PdpcrnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let model = ckpt.model()?;
        *out = Box::into_raw(Box::new(PdpcrnModel {
            model,
            store: ckpt.store,
        }));
        Ok(())
    })
}

/// Builds a freshly initialized network from a preset name ("full",
/// "dpcrn", "tiny" or "desk").
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdpcrn_model_from_preset(
    preset: *const c_char,
    seed: u64,
    out: *mut *mut PdpcrnModel,
) -> PdpcrnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = match str_arg(preset, "preset")? {
            "full" => ModelConfig::full(),
            "dpcrn" => ModelConfig::dpcrn(),
            "tiny" => ModelConfig::tiny(),
            "desk" => ModelConfig::desk(),
            other => {
                return Err(Failure(
                    PdpcrnStatus::InvalidArgument,
                    format!("unknown preset {other:?}"),
                ))
            }
        };
        let (model, store) = Model::build(&cfg, seed)?;
        *out = Box::into_raw(Box::new(PdpcrnModel { model, store }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pdpcrn_model_free(model: *mut PdpcrnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Microphone count the network expects.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdpcrn_model_mics(
    model: *const PdpcrnModel,
    out: *mut usize,
) -> PdpcrnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.config.mics;
        Ok(())
    })
}

/// Number of trainable parameters.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdpcrn_model_param_count(
    model: *const PdpcrnModel,
    out: *mut usize,
) -> PdpcrnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.store.param_count();
        Ok(())
    })
}

/// Enhances `channels × frames` planar samples at 16 kHz into `output`
/// (same layout and size). `channels` must equal the model's mics.
///
/// # Safety
/// `input` and `output` must each hold `channels * frames` floats.
#[no_mangle]
pub unsafe extern "C" fn pdpcrn_enhance(
    model: *const PdpcrnModel,
    input: *const f32,
    channels: usize,
    frames: usize,
    output: *mut f32,
) -> PdpcrnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let total = channels.checked_mul(frames).ok_or_else(|| {
            Failure(
                PdpcrnStatus::InvalidArgument,
                "channels * frames overflows".into(),
            )
        })?;
        let input = slice_arg(input, total, "input")?;
        if output.is_null() {
            return Err(null("output"));
        }
        if channels == 0 || frames == 0 {
            return Err(Failure(PdpcrnStatus::InvalidArgument, "empty input".into()));
        }
        let wave = MultichannelWave::new(SAMPLE_RATE, input.chunks(frames).map(widen).collect())?;
        let enhanced = Enhancer::Network {
            model: &m.model,
            store: &m.store,
        }
        .enhance(&wave, &wave)?;
        let out = std::slice::from_raw_parts_mut(output, total);
        for (dst, src) in out.chunks_mut(frames).zip(enhanced.channels()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s as f32;
            }
        }
        Ok(())
    })
}

/// STOI of `processed` against `clean` as a fraction in [0, 1].
///
/// # Safety
/// Both buffers must hold `len` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pdpcrn_stoi(
    clean: *const f32,
    processed: *const f32,
    len: usize,
    sample_rate: u32,
    out: *mut f64,
) -> PdpcrnStatus {
    guard(|| {
        let clean = slice_arg(clean, len, "clean")?;
        let processed = slice_arg(processed, len, "processed")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = stoi(&widen(clean), &widen(processed), sample_rate)?;
        Ok(())
    })
}

/// SI-SDR of `estimate` against `reference` in dB.
///
/// # Safety
/// Both buffers must hold `len` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pdpcrn_si_sdr(
    reference: *const f32,
    estimate: *const f32,
    len: usize,
    out: *mut f64,
) -> PdpcrnStatus {
    guard(|| {
        let reference = slice_arg(reference, len, "reference")?;
        let estimate = slice_arg(estimate, len, "estimate")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = si_sdr(&widen(reference), &widen(estimate))?;
        Ok(())
    })
}
