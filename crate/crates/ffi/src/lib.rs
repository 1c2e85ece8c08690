//! C ABI over `msda-core`.
//!
//! Matrices cross the boundary as row-major `double` buffers with explicit
//! dimensions. Every function returns an [`MsdaStatus`]; on failure the
//! message is available from [`msda_last_error`] until the next call on the
//! same thread. Panics are caught and reported as [`MsdaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use msda_core::adapt::{schedule, ScheduleConfig};
use msda_core::alignment::{euclidean_align, SubjectDataset, Trial};
use msda_core::divergence::{ccs_divergence, cs_divergence};
use msda_core::kernels::KernelConfig;
use msda_core::model::{prepare_inputs, Backbone};
use msda_core::selection::select_by_percentile;
use msda_core::{io, Error, Mat};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsdaStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Numeric = 3,
    Degenerate = 4,
    SampleSize = 5,
    Parameter = 6,
    State = 7,
    Config = 8,
    Io = 9,
    Parse = 10,
    BufferTooSmall = 11,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsdaKernelKind {
    /// Single Gaussian kernel with the given bandwidth.
    Fixed = 0,
    /// Median pairwise distance of the pooled samples.
    Median = 1,
    /// Average of kernels at 0.5, 1 and 2 times the median bandwidth.
    Multi = 2,
}

/// Trained backbone loaded from a checkpoint.
pub struct MsdaModel {
    backbone: Backbone,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MsdaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => MsdaStatus::Shape,
            Error::Numeric(_) => MsdaStatus::Numeric,
            Error::Degenerate(_) => MsdaStatus::Degenerate,
            Error::SampleSize(_) => MsdaStatus::SampleSize,
            Error::Parameter(_) => MsdaStatus::Parameter,
            Error::State(_) => MsdaStatus::State,
            Error::Config(_) => MsdaStatus::Config,
            Error::Parse { .. } => MsdaStatus::Parse,
            Error::Io { .. } => MsdaStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: Option<String>) {
    let msg = msg.map(|m| CString::new(m.replace('\0', " ")).expect("interior nul removed"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> MsdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            MsdaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(Some(msg));
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(Some(format!("panic: {msg}")));
            MsdaStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MsdaStatus::NullPointer, format!("{what} is null"))
}

/// Borrows `rows * cols` doubles as a matrix.
unsafe fn read_mat(ptr: *const f64, rows: usize, cols: usize, what: &str) -> Result<Mat, Failure> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(MsdaStatus::Shape, format!("{what}: {rows} x {cols} overflows")))?;
    if len == 0 {
        return Ok(Mat::new(rows, cols, Vec::new())?);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(Mat::new(rows, cols, std::slice::from_raw_parts(ptr, len).to_vec())?)
}

unsafe fn write_out<T: Copy>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = value;
    Ok(())
}

fn kernel(kind: MsdaKernelKind, sigma: f64) -> KernelConfig {
    match kind {
        MsdaKernelKind::Fixed => KernelConfig::fixed(sigma),
        MsdaKernelKind::Median => KernelConfig::median(),
        MsdaKernelKind::Multi => KernelConfig::default(),
    }
}

/// Message of the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn msda_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Cauchy–Schwarz divergence between two sample sets sharing `dim` columns.
/// `sigma` is used only by the fixed kernel.
///
/// # Safety
/// `source` and `target` must point to `n_source * dim` and `n_target * dim`
/// doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msda_cs_divergence(
    source: *const f64,
    n_source: usize,
    target: *const f64,
    n_target: usize,
    dim: usize,
    kind: MsdaKernelKind,
    sigma: f64,
    out: *mut f64,
) -> MsdaStatus {
    guard(|| {
        let s = read_mat(source, n_source, dim, "source")?;
        let t = read_mat(target, n_target, dim, "target")?;
        let v = cs_divergence(&s, &t, &kernel(kind, sigma))?;
        write_out(out, v.value, "out")
    })
}

/// Conditional Cauchy–Schwarz divergence between `(z, y)` pairs. Features
/// share `dim` columns and outputs share `out_dim` columns.
///
/// # Safety
/// Each pointer must reference the number of doubles implied by its
/// dimensions; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msda_ccs_divergence(
    z_a: *const f64,
    y_a: *const f64,
    n_a: usize,
    z_b: *const f64,
    y_b: *const f64,
    n_b: usize,
    dim: usize,
    out_dim: usize,
    kind: MsdaKernelKind,
    sigma: f64,
    out_sigma: f64,
    out: *mut f64,
) -> MsdaStatus {
    guard(|| {
        let za = read_mat(z_a, n_a, dim, "z_a")?;
        let ya = read_mat(y_a, n_a, out_dim, "y_a")?;
        let zb = read_mat(z_b, n_b, dim, "z_b")?;
        let yb = read_mat(y_b, n_b, out_dim, "y_b")?;
        let v = ccs_divergence(&za, &ya, &zb, &yb, &kernel(kind, sigma), &kernel(kind, out_sigma))?;
        write_out(out, v.value, "out")
    })
}

/// Euclidean Alignment of `n_trials` trials of `channels x samples`, laid
/// out trial-major then row-major. Writes the aligned trials to `out`
/// (same layout, may not alias `trials`).
///
/// # Safety
/// `trials` and `out` must each hold `n_trials * channels * samples` doubles.
#[no_mangle]
pub unsafe extern "C" fn msda_euclidean_align(
    trials: *const f64,
    n_trials: usize,
    channels: usize,
    samples: usize,
    out: *mut f64,
) -> MsdaStatus {
    guard(|| {
        let ds = read_trials(trials, n_trials, channels, samples)?;
        let aligned = euclidean_align(&ds)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let per = channels * samples;
        let dst = std::slice::from_raw_parts_mut(out, n_trials * per);
        for (chunk, trial) in dst.chunks_exact_mut(per).zip(&aligned.trials) {
            chunk.copy_from_slice(trial.signal.data());
        }
        Ok(())
    })
}

unsafe fn read_trials(ptr: *const f64, n: usize, channels: usize, samples: usize) -> Result<SubjectDataset, Failure> {
    let all = read_mat(ptr, n, channels * samples, "trials")?;
    let trials = (0..n)
        .map(|i| Ok(Trial::new(Mat::new(channels, samples, all.row(i).to_vec())?, None)))
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(SubjectDataset::new("ffi", trials, 2)?)
}

/// Loss weights `(alpha_tau, beta_tau)` at epoch `tau`.
///
/// # Safety
/// `alpha_out` and `beta_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msda_schedule(
    tau: f64,
    alpha: f64,
    beta: f64,
    offset: f64,
    alpha_out: *mut f64,
    beta_out: *mut f64,
) -> MsdaStatus {
    guard(|| {
        if ![tau, alpha, beta, offset].iter().all(|v| v.is_finite()) {
            return Err(Failure(MsdaStatus::Parameter, "schedule arguments must be finite".into()));
        }
        let cfg = ScheduleConfig { alpha, beta, offset, ..ScheduleConfig::default() };
        let (a, b) = schedule(tau, &cfg);
        write_out(alpha_out, a, "alpha_out")?;
        write_out(beta_out, b, "beta_out")
    })
}

/// Percentile source selection over `n` source-to-target distances. The
/// selected indices (ascending) go to `selected` (capacity `capacity`), their
/// count to `n_selected` and the threshold to `threshold`. `fallback` is set
/// to 1 when no distance fell below the threshold and the nearest source was
/// taken. Returns `BufferTooSmall` (with `n_selected` set) if `capacity` is
/// insufficient.
///
/// # Safety
/// `dists` must hold `n` doubles and `selected` `capacity` entries; the
/// remaining outputs must be writable (`fallback` may be null).
#[no_mangle]
pub unsafe extern "C" fn msda_select_by_percentile(
    dists: *const f64,
    n: usize,
    q: f64,
    selected: *mut usize,
    capacity: usize,
    n_selected: *mut usize,
    threshold: *mut f64,
    fallback: *mut i32,
) -> MsdaStatus {
    guard(|| {
        let d = read_mat(dists, 1, n, "dists")?;
        let sel = select_by_percentile(d.data(), q)?;
        write_out(n_selected, sel.selected.len(), "n_selected")?;
        write_out(threshold, sel.threshold, "threshold")?;
        if !fallback.is_null() {
            *fallback = i32::from(sel.fallback_used);
        }
        if sel.selected.len() > capacity {
            return Err(Failure(
                MsdaStatus::BufferTooSmall,
                format!("{} indices selected, capacity {capacity}", sel.selected.len()),
            ));
        }
        if !sel.selected.is_empty() {
            if selected.is_null() {
                return Err(null("selected"));
            }
            std::slice::from_raw_parts_mut(selected, sel.selected.len()).copy_from_slice(&sel.selected);
        }
        Ok(())
    })
}

/// Loads a checkpoint written by `msda train`. Release with
/// [`msda_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msda_model_load(path: *const c_char, out: *mut *mut MsdaModel) -> MsdaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(MsdaStatus::Parameter, "path is not UTF-8".into()))?;
        let backbone = io::load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(MsdaModel { backbone }));
        Ok(())
    })
}

/// Channels, samples per trial and class count expected by the model.
///
/// # Safety
/// `model` must come from [`msda_model_load`]; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn msda_model_shape(
    model: *const MsdaModel,
    channels: *mut usize,
    samples: *mut usize,
    n_classes: *mut usize,
) -> MsdaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = &m.backbone.config;
        write_out(channels, cfg.channels, "channels")?;
        write_out(samples, cfg.samples, "samples")?;
        write_out(n_classes, cfg.n_classes, "n_classes")
    })
}

/// Predicts a class (0-based) per trial. With `align` non-zero the trials
/// are first Euclidean-aligned as one subject, matching training.
///
/// # Safety
/// `model` must come from [`msda_model_load`]; `trials` must hold
/// `n_trials * channels * samples` doubles and `labels_out` `n_trials`
/// entries.
#[no_mangle]
pub unsafe extern "C" fn msda_model_predict(
    model: *const MsdaModel,
    trials: *const f64,
    n_trials: usize,
    channels: usize,
    samples: usize,
    align: i32,
    labels_out: *mut usize,
) -> MsdaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = &m.backbone.config;
        if (channels, samples) != (cfg.channels, cfg.samples) {
            return Err(Failure(
                MsdaStatus::Shape,
                format!(
                    "trials are {channels} x {samples}, model expects {} x {}",
                    cfg.channels, cfg.samples
                ),
            ));
        }
        let mut ds = read_trials(trials, n_trials, channels, samples)?;
        if align != 0 {
            ds = euclidean_align(&ds)?;
        }
        let labels = m.backbone.predict(&prepare_inputs(&ds, cfg.pool)?)?;
        if n_trials > 0 {
            if labels_out.is_null() {
                return Err(null("labels_out"));
            }
            std::slice::from_raw_parts_mut(labels_out, n_trials).copy_from_slice(&labels);
        }
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`msda_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn msda_model_free(model: *mut MsdaModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}
