//! C ABI over `light-peft`: load configs and checkpoints, swap adapters, run
//! inference and the full training pipeline.
//!
//! Every function returns an [`LpftStatus`]. On failure a message describing the
//! error is available from [`lpft_last_error`] on the same thread. Handles are
//! opaque; free them with the matching `_free` function. No function unwinds
//! across the boundary: panics are caught and reported as `LPFT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use light_peft::graph::Graph;
use light_peft::io::{load_config, parse_config, swap_adapter, Checkpoint, Stage};
use light_peft::model::{count_params, model_forward, ForwardOptions, FoundationModel};
use light_peft::peft::PeftSet;
use light_peft::pipeline::{run_all, TrainConfig};
use light_peft::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    /// Bad magic, unsupported version or malformed contents.
    Format = 5,
    Checksum = 6,
    Compatibility = 7,
    Runtime = 8,
    Panic = 9,
}

/// A parsed and validated run configuration.
pub struct LpftConfig {
    inner: TrainConfig,
}

/// A model with its PEFT modules, ready for inference.
pub struct LpftModel {
    model: FoundationModel,
    peft: PeftSet,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LpftParamCounts {
    pub foundation: u64,
    pub classifier: u64,
    pub peft: u64,
    pub trainable: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(LpftStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::ConfigParse { .. } | Error::InvalidValue { .. } => LpftStatus::Config,
            Error::Io(_) => LpftStatus::Io,
            Error::BadMagic | Error::BadVersion(_) | Error::Malformed(_) => LpftStatus::Format,
            Error::Checksum { .. } => LpftStatus::Checksum,
            Error::Compatibility(_) => LpftStatus::Compatibility,
            _ => LpftStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: LpftStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LpftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            LpftStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            LpftStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(LpftStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(LpftStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .map_or_else(|| fail(LpftStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .map_or_else(|| fail(LpftStatus::NullPointer, format!("{what} is null")), Ok)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lpft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn lpft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads a `key = value` configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpft_config_load(path: *const c_char, out: *mut *mut LpftConfig) -> LpftStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let inner = load_config(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(LpftConfig { inner }));
        Ok(())
    })
}

/// Parses configuration text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpft_config_parse(text: *const c_char, out: *mut *mut LpftConfig) -> LpftStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let inner = parse_config(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(LpftConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `config` must come from `lpft_config_load`/`lpft_config_parse` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lpft_config_free(config: *mut LpftConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs estimation, pruning, fine-tuning and evaluation, writes the fine-tuned
/// checkpoint to `checkpoint_path` and stores the eval accuracy in `accuracy`.
///
/// # Safety
/// `config` must be a live handle, `checkpoint_path` a NUL-terminated string and
/// `accuracy` writable.
#[no_mangle]
pub unsafe extern "C" fn lpft_run_all(
    config: *const LpftConfig,
    checkpoint_path: *const c_char,
    accuracy: *mut f64,
) -> LpftStatus {
    guard(|| {
        let cfg = &handle(config, "config")?.inner;
        let path = PathBuf::from(str_arg(checkpoint_path, "checkpoint_path")?);
        let acc = out_arg(accuracy, "accuracy")?;
        let outcome = run_all(cfg)?;
        Checkpoint::pruned(cfg, &outcome.pruned, Stage::Finetuned).save(&path)?;
        *acc = outcome.report.accuracy;
        Ok(())
    })
}

/// Loads a checkpoint of any stage as an inference model.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpft_model_load(path: *const c_char, out: *mut *mut LpftModel) -> LpftStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let (model, peft) = Checkpoint::load(str_arg(path, "path")?)?.runnable()?;
        *out = Box::into_raw(Box::new(LpftModel { model, peft }));
        Ok(())
    })
}

/// The base checkpoint's pruned foundation with the adapter checkpoint's modules
/// and classifier. Incompatible plans give `LPFT_STATUS_COMPATIBILITY`.
///
/// # Safety
/// Both paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpft_model_swap(
    base_path: *const c_char,
    adapter_path: *const c_char,
    out: *mut *mut LpftModel,
) -> LpftStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let base = Checkpoint::load(str_arg(base_path, "base_path")?)?;
        let adapter = Checkpoint::load(str_arg(adapter_path, "adapter_path")?)?;
        let (model, peft) = swap_adapter(&base, &adapter)?;
        *out = Box::into_raw(Box::new(LpftModel { model, peft }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lpft_model_num_classes(model: *const LpftModel, out: *mut usize) -> LpftStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out_arg(out, "out")? = m.model.config.num_classes;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lpft_model_param_counts(model: *const LpftModel, out: *mut LpftParamCounts) -> LpftStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let c = count_params(&m.model, &m.peft, None);
        *out_arg(out, "out")? = LpftParamCounts {
            foundation: c.foundation as u64,
            classifier: c.classifier as u64,
            peft: c.peft as u64,
            trainable: c.trainable as u64,
        };
        Ok(())
    })
}

/// Logits for `batch` sequences of `seq` token ids, written row-major into
/// `logits`, which must hold `batch * num_classes` values.
///
/// # Safety
/// `tokens` must point to `batch * seq` readable values and `logits` to
/// `logits_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn lpft_model_forward(
    model: *const LpftModel,
    tokens: *const u32,
    batch: usize,
    seq: usize,
    logits: *mut f64,
    logits_len: usize,
) -> LpftStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if tokens.is_null() || logits.is_null() {
            return fail(LpftStatus::NullPointer, "tokens or logits is null");
        }
        if batch == 0 || seq == 0 {
            return fail(LpftStatus::InvalidArgument, "batch and seq must be positive");
        }
        let need = batch * m.model.config.num_classes;
        if logits_len < need {
            return fail(
                LpftStatus::InvalidArgument,
                format!("logits buffer holds {logits_len} values, {need} needed"),
            );
        }
        let toks = std::slice::from_raw_parts(tokens, batch * seq);
        let mut g = Graph::new();
        let (out, _) = model_forward(
            &mut g,
            &m.model,
            None,
            &m.peft,
            toks,
            batch,
            seq,
            ForwardOptions::inference(),
        )?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(g.value(out));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `lpft_model_load`/`lpft_model_swap` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lpft_model_free(model: *mut LpftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
