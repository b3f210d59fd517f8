//! C ABI over the estimator.
//!
//! Objects are opaque handles created by `dgpi_*_new`/`load` functions and
//! released with the matching `_free`. Every fallible call returns a
//! [`DgpiStatus`]; on failure the message is available through
//! [`dgpi_last_error`] on the same thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dyngpi::data_model::{ingest_embeddings, load_dataset, save_dataset, Dataset, Trajectory};
use dyngpi::estimator::{estimate_grid, EstimateResult, EstimatorConfig};
use dyngpi::intervention::{q_shift, InterventionSpec};
use dyngpi::numerics::Rng;
use dyngpi::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Estimation = 5,
    Panic = 6,
}

/// A loaded dataset.
pub struct DgpiDataset {
    inner: Dataset,
}

/// Estimator settings.
pub struct DgpiConfig {
    inner: EstimatorConfig,
}

/// One cross-fitted estimate.
pub struct DgpiEstimate {
    inner: EstimateResult,
}

/// Scalar summary of an estimate.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DgpiSummary {
    pub psi_hat: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub missing_strata: usize,
    pub overlap_projections: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut buf = msg.as_bytes().to_vec();
        buf.retain(|&b| b != 0);
        *e.borrow_mut() = buf;
    });
}

fn status_of(e: &Error) -> DgpiStatus {
    match e {
        Error::Config(_) => DgpiStatus::Config,
        Error::InvalidArgument(_) => DgpiStatus::InvalidArgument,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::InvalidUnit { .. }
        | Error::Misaligned(_)
        | Error::Shape(_) => DgpiStatus::Data,
        _ => DgpiStatus::Estimation,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DgpiStatus, String)>) -> DgpiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DgpiStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DgpiStatus::Panic
        }
    }
}

fn lib(e: Error) -> (DgpiStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DgpiStatus, String) {
    (DgpiStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (DgpiStatus, String)> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (DgpiStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DgpiStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
#[no_mangle]
pub unsafe extern "C" fn dgpi_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let k = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, k);
            *buf.add(k) = 0;
        }
        msg.len()
    })
}

/// Shifted treatment probability `δp / (δp + 1 − p)`.
#[no_mangle]
pub unsafe extern "C" fn dgpi_q_shift(delta: f64, p: f64, out: *mut f64) -> DgpiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = q_shift(delta, p).map_err(lib)?;
        Ok(())
    })
}

/// Reads a dataset in the native JSON-lines format.
#[no_mangle]
pub unsafe extern "C" fn dgpi_dataset_load(path: *const c_char, out: *mut *mut DgpiDataset) -> DgpiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = load_dataset(&path_arg(path, "path")?).map_err(lib)?;
        put(out, DgpiDataset { inner: ds });
        Ok(())
    })
}

/// Assembles a dataset from embeddings, outcomes and treatments files.
#[no_mangle]
pub unsafe extern "C" fn dgpi_dataset_ingest(
    embeddings: *const c_char,
    outcomes: *const c_char,
    treatments: *const c_char,
    out: *mut *mut DgpiDataset,
) -> DgpiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = ingest_embeddings(
            &path_arg(embeddings, "embeddings")?,
            &path_arg(outcomes, "outcomes")?,
            &path_arg(treatments, "treatments")?,
        )
        .map_err(lib)?;
        put(out, DgpiDataset { inner: ds });
        Ok(())
    })
}

/// Builds a dataset from flat arrays.
///
/// `lengths[i]` is the segment count of unit `i`; `w` holds the treatments
/// of all units back to back (sum of lengths entries) and `r` the
/// embeddings (sum of lengths times `d_r` entries).
#[no_mangle]
pub unsafe extern "C" fn dgpi_dataset_from_arrays(
    n: usize,
    d_r: usize,
    s_max: usize,
    lengths: *const usize,
    w: *const u8,
    r: *const f64,
    y: *const f64,
    out: *mut *mut DgpiDataset,
) -> DgpiStatus {
    guard(|| {
        if out.is_null() || lengths.is_null() || w.is_null() || r.is_null() || y.is_null() {
            return Err(null("an argument"));
        }
        if n == 0 || d_r == 0 {
            return Err((DgpiStatus::InvalidArgument, "n and d_r must be positive".into()));
        }
        let lengths = std::slice::from_raw_parts(lengths, n);
        let total: usize = lengths.iter().sum();
        let w = std::slice::from_raw_parts(w, total);
        let r = std::slice::from_raw_parts(r, total * d_r);
        let y = std::slice::from_raw_parts(y, n);
        let mut units = Vec::with_capacity(n);
        let mut at = 0;
        for (i, &len) in lengths.iter().enumerate() {
            let segs = r[at * d_r..(at + len) * d_r].chunks(d_r).map(<[f64]>::to_vec).collect();
            units.push(Trajectory::new(y[i], w[at..at + len].to_vec(), segs).map_err(lib)?);
            at += len;
        }
        let ds = Dataset::new(units, d_r, s_max).map_err(lib)?;
        put(out, DgpiDataset { inner: ds });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dgpi_dataset_save(ds: *const DgpiDataset, path: *const c_char) -> DgpiStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        save_dataset(&ds.inner, &path_arg(path, "path")?).map_err(lib)
    })
}

/// Number of units; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dgpi_dataset_len(ds: *const DgpiDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

#[no_mangle]
pub unsafe extern "C" fn dgpi_dataset_s_max(ds: *const DgpiDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.s_max())
}

#[no_mangle]
pub unsafe extern "C" fn dgpi_dataset_d_r(ds: *const DgpiDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.d_r())
}

#[no_mangle]
pub unsafe extern "C" fn dgpi_dataset_free(ds: *mut DgpiDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Estimator settings with every default.
#[no_mangle]
pub unsafe extern "C" fn dgpi_config_default(out: *mut *mut DgpiConfig) -> DgpiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, DgpiConfig { inner: EstimatorConfig::default() });
        Ok(())
    })
}

/// Estimator settings from TOML text with the keys of the `[estimator]`
/// table. Unknown keys are rejected.
#[no_mangle]
pub unsafe extern "C" fn dgpi_config_from_toml(text: *const c_char, out: *mut *mut DgpiConfig) -> DgpiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: EstimatorConfig =
            toml::from_str(str_arg(text, "text")?).map_err(|e| (DgpiStatus::Config, e.to_string()))?;
        cfg.validate().map_err(lib)?;
        put(out, DgpiConfig { inner: cfg });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dgpi_config_free(cfg: *mut DgpiConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Cross-fitted estimate at the intervention `delta[0..delta_len]`, which
/// must have one entry per position.
#[no_mangle]
pub unsafe extern "C" fn dgpi_estimate(
    ds: *const DgpiDataset,
    cfg: *const DgpiConfig,
    delta: *const f64,
    delta_len: usize,
    seed: u64,
    out: *mut *mut DgpiEstimate,
) -> DgpiStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        if delta.is_null() || out.is_null() {
            return Err(null("delta or out"));
        }
        let spec = InterventionSpec::new(std::slice::from_raw_parts(delta, delta_len).to_vec()).map_err(lib)?;
        let mut rng = Rng::new(seed);
        let result = estimate_grid(&ds.inner, std::slice::from_ref(&spec), &cfg.inner, &mut rng)
            .map_err(lib)?
            .pop()
            .expect("one result per intervention")
            .map_err(lib)?;
        put(out, DgpiEstimate { inner: result });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dgpi_estimate_summary(est: *const DgpiEstimate, out: *mut DgpiSummary) -> DgpiStatus {
    guard(|| {
        let est = est.as_ref().ok_or_else(|| null("estimate"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = &est.inner;
        *out = DgpiSummary {
            psi_hat: r.psi_hat,
            std_error: r.std_error(),
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            n: r.n,
            missing_strata: r.missing_strata,
            overlap_projections: r.overlap_projections,
        };
        Ok(())
    })
}

/// Copies up to `len` per-unit contributions into `buf` and returns how
/// many exist. Pass a null buffer to query the count.
#[no_mangle]
pub unsafe extern "C" fn dgpi_estimate_contributions(est: *const DgpiEstimate, buf: *mut f64, len: usize) -> usize {
    let Some(est) = est.as_ref() else { return 0 };
    let c = &est.inner.contributions;
    if !buf.is_null() {
        ptr::copy_nonoverlapping(c.as_ptr(), buf, c.len().min(len));
    }
    c.len()
}

#[no_mangle]
pub unsafe extern "C" fn dgpi_estimate_free(est: *mut DgpiEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}
