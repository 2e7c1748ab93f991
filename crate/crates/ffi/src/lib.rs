//! C ABI for lcslab.
//!
//! Datasets and models are opaque handles created by `lcs_*_new`/`load`
//! functions and released with the matching `_free`. Every fallible call
//! returns an [`LcsStatus`]; on failure the message is kept per thread and
//! can be copied out with [`lcs_last_error`]. Matrices are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use lcslab::dataset::Dataset;
use lcslab::eval;
use lcslab::lcsvae::{Checkpoint, Model, Prediction};
use lcslab::resampler::{solve_marginals, ResampleSpec};
use lcslab::scm::{self, ScmConfig};
use lcslab::trainer::{self, TrainConfig};
use lcslab::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcsStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numeric = 3,
    Io = 4,
    Invalid = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A dataset with its ground-truth latents when it was generated.
pub struct LcsDataset {
    inner: Dataset,
}

/// A trained or loaded VAE.
pub struct LcsModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> LcsStatus {
    match e {
        Error::Config { .. } => LcsStatus::Config,
        Error::NonFinite { .. } | Error::NoConvergence { .. } | Error::Ndiff(_) => LcsStatus::Numeric,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => LcsStatus::Io,
        Error::Invalid(_) => LcsStatus::Invalid,
    }
}

struct Fail(LcsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(LcsStatus::Config, e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail(LcsStatus::Io, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LcsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status plus the last-error text.
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> LcsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            LcsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            LcsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LcsStatus::Invalid, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, cap: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if need > cap {
        return Err(Fail(
            LcsStatus::BufferTooSmall,
            format!("{what} needs {need} elements, got {cap}"),
        ));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, need))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    *p = v;
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn rows(flat: &[f64], n: usize, d: usize) -> Vec<Vec<f64>> {
    if d == 0 {
        return vec![Vec::new(); n];
    }
    flat.chunks(d).map(<[f64]>::to_vec).collect()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to fit) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lcs_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Samples a dataset from a JSON structural model config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcs_dataset_generate(config_json: *const c_char, out: *mut *mut LcsDataset) -> LcsStatus {
    guard(|| {
        let text = str_arg(config_json, "config_json")?;
        let config: ScmConfig = serde_json::from_str(text)?;
        let ds = scm::generate(&config)?;
        write_out(out, Box::into_raw(Box::new(LcsDataset { inner: ds })), "out")
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lcs_dataset_free(ds: *mut LcsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Row count, observation width and number of domains.
///
/// # Safety
/// `ds` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lcs_dataset_shape(
    ds: *const LcsDataset,
    rows: *mut usize,
    d_x: *mut usize,
    num_domains: *mut usize,
) -> LcsStatus {
    guard(|| {
        let ds = &handle(ds, "ds")?.inner;
        write_out(rows, ds.len(), "rows")?;
        write_out(d_x, ds.d_x(), "d_x")?;
        write_out(num_domains, ds.num_domains, "num_domains")
    })
}

/// Copies observations (`rows × d_x`) and domain ids (`rows`).
///
/// # Safety
/// `x` must hold `x_cap` doubles and `domains` `domains_cap` sizes.
#[no_mangle]
pub unsafe extern "C" fn lcs_dataset_copy(
    ds: *const LcsDataset,
    x: *mut f64,
    x_cap: usize,
    domains: *mut usize,
    domains_cap: usize,
) -> LcsStatus {
    guard(|| {
        let ds = &handle(ds, "ds")?.inner;
        let xs = out_slice(x, x_cap, ds.len() * ds.d_x(), "x")?;
        let us = out_slice(domains, domains_cap, ds.len(), "domains")?;
        for (i, s) in ds.samples.iter().enumerate() {
            xs[i * ds.d_x()..(i + 1) * ds.d_x()].copy_from_slice(&s.x);
            us[i] = s.domain;
        }
        Ok(())
    })
}

/// Trains a VAE on `ds` with a JSON training config.
///
/// # Safety
/// `ds` must be live, `train_json` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn lcs_model_train(
    ds: *const LcsDataset,
    train_json: *const c_char,
    d_c: usize,
    d_s: usize,
    out: *mut *mut LcsModel,
) -> LcsStatus {
    guard(|| {
        let ds = &handle(ds, "ds")?.inner;
        let tc: TrainConfig = serde_json::from_str(str_arg(train_json, "train_json")?)?;
        let mc = tc.model_config(ds, d_c, d_s)?;
        let (model, _) = trainer::train(ds, &tc, &mc)?;
        write_out(out, Box::into_raw(Box::new(LcsModel { inner: model })), "out")
    })
}

/// Loads a checkpoint written by `lcslab train`.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn lcs_model_load(path: *const c_char, out: *mut *mut LcsModel) -> LcsStatus {
    guard(|| {
        let file = File::open(str_arg(path, "path")?)?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file)).map_err(|e| Fail(LcsStatus::Io, e.to_string()))?;
        let model = Model::from_checkpoint(&ck)?;
        write_out(out, Box::into_raw(Box::new(LcsModel { inner: model })), "out")
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lcs_model_free(model: *mut LcsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of doubles one prediction fills: 1 for regression, else the class count.
///
/// # Safety
/// `model` must be live and `width` valid.
#[no_mangle]
pub unsafe extern "C" fn lcs_model_output_width(model: *const LcsModel, width: *mut usize) -> LcsStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        write_out(width, m.config().classifier_out(), "width")
    })
}

/// Predicts `n` rows of `x` (`n × d_x`) from domains `domains`, writing
/// `n × width` doubles to `out`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn lcs_model_predict(
    model: *const LcsModel,
    x: *const f64,
    n: usize,
    d_x: usize,
    domains: *const usize,
    out: *mut f64,
    out_cap: usize,
) -> LcsStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let xs = rows(slice_arg(x, n * d_x, "x")?, n, d_x);
        let us = slice_arg(domains, n, "domains")?;
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let preds = m.predict_rows(&refs, us)?;
        let width = m.config().classifier_out();
        let dst = out_slice(out, out_cap, n * width, "out")?;
        for (i, p) in preds.iter().enumerate() {
            match p {
                Prediction::Value(v) => dst[i] = *v,
                Prediction::Probs(ps) => dst[i * width..(i + 1) * width].copy_from_slice(ps),
            }
        }
        Ok(())
    })
}

/// MCC between the model's content posterior means and the dataset's true content.
///
/// # Safety
/// Handles must be live and `mcc` valid.
#[no_mangle]
pub unsafe extern "C" fn lcs_model_content_mcc(model: *const LcsModel, ds: *const LcsDataset, mcc: *mut f64) -> LcsStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let ds = &handle(ds, "ds")?.inner;
        let (v, _) = eval::content_mcc(m, ds)?;
        write_out(mcc, v, "mcc")
    })
}

/// Mean absolute correlation after optimal matching of `n × d` matrices.
///
/// # Safety
/// `truth` and `estimate` must hold `n × d` doubles.
#[no_mangle]
pub unsafe extern "C" fn lcs_mcc(truth: *const f64, estimate: *const f64, n: usize, d: usize, mcc: *mut f64) -> LcsStatus {
    guard(|| {
        let t = rows(slice_arg(truth, n * d, "truth")?, n, d);
        let e = rows(slice_arg(estimate, n * d, "estimate")?, n, d);
        let (v, _) = eval::mcc(&t, &e)?;
        write_out(mcc, v, "mcc")
    })
}

/// `KL(p ‖ q)` for two categorical distributions of length `c`.
///
/// # Safety
/// `p` and `q` must hold `c` doubles.
#[no_mangle]
pub unsafe extern "C" fn lcs_label_kl(p: *const f64, q: *const f64, c: usize, kl: *mut f64) -> LcsStatus {
    guard(|| {
        let v = eval::label_kl(slice_arg(p, c, "p")?, slice_arg(q, c, "q")?)?;
        write_out(kl, v, "kl")
    })
}

/// Solves for `k` label marginals over `c` classes whose pairwise KL is
/// `target_kl`, writing them as `k × c` doubles.
///
/// # Safety
/// `out` must hold `out_cap` doubles; `max_residual` may be null.
#[no_mangle]
pub unsafe extern "C" fn lcs_solve_marginals(
    k: usize,
    c: usize,
    target_kl: f64,
    seed: u64,
    out: *mut f64,
    out_cap: usize,
    max_residual: *mut f64,
) -> LcsStatus {
    guard(|| {
        let set = solve_marginals(&ResampleSpec {
            num_domains: k,
            num_classes: c,
            target_kl,
            seed,
        })?;
        let dst = out_slice(out, out_cap, k * c, "out")?;
        for (row, p) in dst.chunks_mut(c).zip(&set.distributions) {
            row.copy_from_slice(p);
        }
        if !max_residual.is_null() {
            *max_residual = set.max_residual;
        }
        Ok(())
    })
}
