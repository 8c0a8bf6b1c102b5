//! C ABI for `wcomp`.
//!
//! Every function returns a [`WcStatus`]; on failure the message is kept
//! per thread and can be read with [`wc_last_error`]. Handles are opaque and
//! must be released with their `*_free` function. Tensors cross the boundary
//! as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use wcomp::harness::{
    checkpoint::CheckpointFile,
    load_dataset, split_for_seed,
    train::{load_network, network_checkpoint},
    ExperimentConfig, Trainer,
};
use wcomp::nn::Network;
use wcomp::reparam::{psi, psi_grad_ab, psi_inverse, psi_prime, ReparamKind, ReparamParams};
use wcomp::{Dtype, Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Domain = 3,
    Unsupported = 4,
    Dimension = 5,
    Contract = 6,
    Diverged = 7,
    Dataset = 8,
    Checkpoint = 9,
    Config = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcKind {
    Identity = 0,
    Arctan = 1,
    Arcsinh = 2,
    Erf = 3,
    Powerprop = 4,
}

/// Scalar reparameterization; `alpha` is read for `Powerprop` only.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct WcReparam {
    pub kind: WcKind,
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
}

/// Training run over one seed (64-bit precision).
pub struct WcTrainer {
    inner: Trainer<f64>,
}

/// Plain network (64-bit precision).
pub struct WcNetwork {
    inner: Network<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> WcStatus {
    match e {
        Error::InvalidInput(_) => WcStatus::InvalidInput,
        Error::Domain { .. } | Error::InitDomain { .. } => WcStatus::Domain,
        Error::UnsupportedKind { .. } => WcStatus::Unsupported,
        Error::DegenerateDirection { .. } | Error::Dimension { .. } => WcStatus::Dimension,
        Error::Contract(_) => WcStatus::Contract,
        Error::Divergence { .. } | Error::RunDiverged { .. } => WcStatus::Diverged,
        Error::Dataset { .. } => WcStatus::Dataset,
        Error::Checkpoint(_) => WcStatus::Checkpoint,
        Error::Config(_) | Error::Json(_) => WcStatus::Config,
        Error::Io { .. } => WcStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (WcStatus, String)>) -> WcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            WcStatus::Panic
        }
    }
}

fn lift<T>(r: wcomp::Result<T>) -> Result<T, (WcStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (WcStatus, String) {
    (WcStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (WcStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (WcStatus::InvalidInput, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn kind_params(r: &WcReparam) -> (ReparamKind, ReparamParams) {
    let kind = match r.kind {
        WcKind::Identity => ReparamKind::Identity,
        WcKind::Arctan => ReparamKind::Arctan,
        WcKind::Arcsinh => ReparamKind::Arcsinh,
        WcKind::Erf => ReparamKind::Erf,
        WcKind::Powerprop => ReparamKind::Powerprop { alpha: r.alpha },
    };
    (kind, ReparamParams::fixed(r.a, r.b))
}

/// Copies the calling thread's last error message (NUL-terminated, truncated
/// to `cap`) into `buf` and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn wc_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

unsafe fn scalar_op(
    r: *const WcReparam,
    out: *mut f64,
    f: impl FnOnce(ReparamKind, &ReparamParams) -> wcomp::Result<f64>,
) -> WcStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("reparam"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (kind, params) = kind_params(r);
        *out = lift(f(kind, &params))?;
        Ok(())
    })
}

/// `psi(v)`.
///
/// # Safety
/// `reparam` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn wc_psi(reparam: *const WcReparam, v: f64, out: *mut f64) -> WcStatus {
    scalar_op(reparam, out, |k, p| psi(k, p, v))
}

/// `psi'(v)`.
///
/// # Safety
/// `reparam` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn wc_psi_prime(reparam: *const WcReparam, v: f64, out: *mut f64) -> WcStatus {
    scalar_op(reparam, out, |k, p| psi_prime(k, p, v))
}

/// `psi^-1(w)`; `WC_STATUS_DOMAIN` outside the image.
///
/// # Safety
/// `reparam` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn wc_psi_inverse(reparam: *const WcReparam, w: f64, out: *mut f64) -> WcStatus {
    scalar_op(reparam, out, |k, p| psi_inverse(k, p, w))
}

/// `(d psi / da, d psi / db)` at `v`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn wc_psi_grad_ab(
    reparam: *const WcReparam,
    v: f64,
    out_a: *mut f64,
    out_b: *mut f64,
) -> WcStatus {
    guard(|| {
        let r = reparam.as_ref().ok_or_else(|| null("reparam"))?;
        let (oa, ob) = (
            out_a.as_mut().ok_or_else(|| null("out_a"))?,
            out_b.as_mut().ok_or_else(|| null("out_b"))?,
        );
        let (kind, params) = kind_params(r);
        (*oa, *ob) = lift(psi_grad_ab(kind, &params, v))?;
        Ok(())
    })
}

/// Creates a trainer from a JSON experiment config for one seed. Relative
/// dataset paths are resolved against `base_dir` (may be null).
///
/// # Safety
/// `config_json` must be a NUL-terminated string, `base_dir` null or one,
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wc_trainer_new(
    config_json: *const c_char,
    base_dir: *const c_char,
    seed: u64,
    out: *mut *mut WcTrainer,
) -> WcStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let text = path_arg(config_json, "config_json")?;
        let mut config: ExperimentConfig =
            lift(serde_json::from_str(&text.to_string_lossy()).map_err(Error::from))?;
        if !base_dir.is_null() {
            config.dataset.rebase(&path_arg(base_dir, "base_dir")?);
        }
        if config.precision != Dtype::F64 {
            return Err((WcStatus::Unsupported, "the C API trains in f64".into()));
        }
        lift(config.validate())?;
        let (pool, test) = lift(load_dataset(&config.dataset, config.data_seed))?;
        let splits = split_for_seed(&pool, &test, config.validation_split, seed);
        let inner = lift(Trainer::new(&config, seed, splits))?;
        *out = Box::into_raw(Box::new(WcTrainer { inner }));
        Ok(())
    })
}

/// Restores a trainer saved with [`wc_trainer_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wc_trainer_load(path: *const c_char, out: *mut *mut WcTrainer) -> WcStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let ck = lift(CheckpointFile::load(&path_arg(path, "path")?))?;
        let inner = lift(Trainer::from_checkpoint(&ck))?;
        *out = Box::into_raw(Box::new(WcTrainer { inner }));
        Ok(())
    })
}

/// Runs one mini-batch; `*running` becomes 0 once training has ended.
///
/// # Safety
/// `t` must come from this library; `running` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn wc_trainer_step(t: *mut WcTrainer, running: *mut u8) -> WcStatus {
    guard(|| {
        let t = t.as_mut().ok_or_else(|| null("trainer"))?;
        let more = lift(t.inner.step())?;
        if let Some(r) = running.as_mut() {
            *r = u8::from(more);
        }
        Ok(())
    })
}

/// Trains until the configured epoch count is reached.
///
/// # Safety
/// `t` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn wc_trainer_run(t: *mut WcTrainer) -> WcStatus {
    guard(|| {
        let t = t.as_mut().ok_or_else(|| null("trainer"))?;
        while lift(t.inner.step())? {}
        Ok(())
    })
}

/// Number of completed epochs.
///
/// # Safety
/// `t` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wc_trainer_epoch(t: *const WcTrainer, out: *mut usize) -> WcStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("trainer"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = t.inner.epoch();
        Ok(())
    })
}

/// Saves the full training state.
///
/// # Safety
/// `t` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wc_trainer_save(t: *const WcTrainer, path: *const c_char) -> WcStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("trainer"))?;
        let ck = lift(t.inner.checkpoint())?;
        lift(ck.save(&path_arg(path, "path")?))
    })
}

/// Writes the run summary as JSON into `buf` (NUL-terminated). `*len`
/// receives the length without the terminator; a buffer that is too small
/// yields `WC_STATUS_BUFFER_TOO_SMALL` with `*len` still set.
///
/// # Safety
/// `t` must come from this library, `buf` valid for `cap` bytes (or null),
/// `len` valid.
#[no_mangle]
pub unsafe extern "C" fn wc_trainer_result_json(
    t: *const WcTrainer,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> WcStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("trainer"))?;
        let len = len.as_mut().ok_or_else(|| null("len"))?;
        let result = lift(t.inner.finish())?;
        let text = lift(serde_json::to_string(&result).map_err(Error::from))?;
        *len = text.len();
        if buf.is_null() || cap <= text.len() {
            return Err((WcStatus::BufferTooSmall, format!("{} bytes needed", text.len() + 1)));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// Bakes the current weights into a plain network.
///
/// # Safety
/// `t` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn wc_trainer_bake(t: *mut WcTrainer, out: *mut *mut WcNetwork) -> WcStatus {
    guard(|| {
        let t = t.as_mut().ok_or_else(|| null("trainer"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let inner = lift(t.inner.model_mut().bake())?;
        *out = Box::into_raw(Box::new(WcNetwork { inner }));
        Ok(())
    })
}

/// # Safety
/// `t` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wc_trainer_free(t: *mut WcTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Loads a plain (baked) network checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn wc_network_load(path: *const c_char, out: *mut *mut WcNetwork) -> WcStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let ck = lift(CheckpointFile::load(&path_arg(path, "path")?))?;
        let inner = lift(load_network::<f64>(&ck))?;
        *out = Box::into_raw(Box::new(WcNetwork { inner }));
        Ok(())
    })
}

/// # Safety
/// `n` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wc_network_save(n: *const WcNetwork, path: *const c_char) -> WcStatus {
    guard(|| {
        let n = n.as_ref().ok_or_else(|| null("network"))?;
        let ck = lift(network_checkpoint(&n.inner))?;
        lift(ck.save(&path_arg(path, "path")?))
    })
}

/// Features per sample and number of classes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn wc_network_dims(
    n: *const WcNetwork,
    input_len: *mut usize,
    classes: *mut usize,
) -> WcStatus {
    guard(|| {
        let n = n.as_ref().ok_or_else(|| null("network"))?;
        *input_len.as_mut().ok_or_else(|| null("input_len"))? =
            n.inner.arch.input_shape.iter().product();
        let out = lift(n.inner.arch.output_shape())?;
        *classes.as_mut().ok_or_else(|| null("classes"))? = out.iter().product();
        Ok(())
    })
}

/// Eval-mode logits for `batch` samples. `input` holds `batch * input_len`
/// values, `out` must hold `batch * classes`.
///
/// # Safety
/// `input` and `out` must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn wc_network_logits(
    n: *const WcNetwork,
    input: *const f64,
    batch: usize,
    out: *mut f64,
    out_len: usize,
) -> WcStatus {
    guard(|| {
        let n = n.as_ref().ok_or_else(|| null("network"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let d: usize = n.inner.arch.input_shape.iter().product();
        let data = std::slice::from_raw_parts(input, batch * d).to_vec();
        let mut shape = vec![batch];
        shape.extend_from_slice(&n.inner.arch.input_shape);
        let x = lift(Tensor::new(shape, data))?;
        let logits = lift(n.inner.logits(&x))?;
        if out_len < logits.len() {
            return Err((
                WcStatus::BufferTooSmall,
                format!("{} logits, buffer holds {out_len}", logits.len()),
            ));
        }
        ptr::copy_nonoverlapping(logits.data().as_ptr(), out, logits.len());
        Ok(())
    })
}

/// # Safety
/// `n` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wc_network_free(n: *mut WcNetwork) {
    if !n.is_null() {
        drop(Box::from_raw(n));
    }
}
