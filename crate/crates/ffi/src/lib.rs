//! C ABI over `ddim-core`.
//!
//! Schedules and denoisers are opaque heap handles released with their
//! `_free` functions. Arrays are row-major `double` buffers owned by the
//! caller. Every call returns a [`DdimStatus`]; on failure the message is
//! available from [`ddim_last_error`] on the same thread until the next call.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ddim_core::denoiser::{AnalyticDenoiser, DataSpec, Denoiser, MixtureSpec, Mlp};
use ddim_core::harness::slerp::slerp;
use ddim_core::ode::{encode, integrate, Integrator};
use ddim_core::rng::NoiseStream;
use ddim_core::sampler::{draw_latents, run_trajectory, SigmaPolicy};
use ddim_core::{select_subsequence, Error, NoiseSchedule, StateBatch, SubsequenceMode};
use ndarray::Array2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdimStatus {
    Ok = 0,
    NullPointer = 1,
    Parameter = 2,
    Domain = 3,
    Shape = 4,
    Io = 5,
    Format = 6,
    Training = 7,
    Config = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdimMode {
    Linear = 0,
    Quadratic = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdimPolicyKind {
    /// `σ = η·σ_DDPM`; `eta = 0` is deterministic.
    Eta = 0,
    /// Larger noise scale `σ̂`.
    SigmaHat = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimPolicy {
    pub kind: DdimPolicyKind,
    pub eta: f64,
}

/// Opaque noise schedule.
pub struct DdimSchedule {
    inner: NoiseSchedule,
}

/// Opaque noise-prediction model.
pub struct DdimDenoiser {
    inner: Box<dyn Denoiser>,
    dim: usize,
    schedule_hash: String,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DdimStatus {
    match e {
        Error::Parameter(_) => DdimStatus::Parameter,
        Error::Domain(_) => DdimStatus::Domain,
        Error::Shape { .. } => DdimStatus::Shape,
        Error::Training { .. } => DdimStatus::Training,
        Error::Config { .. } => DdimStatus::Config,
        Error::Format(_) => DdimStatus::Format,
        Error::Io(_) => DdimStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DdimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DdimStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            DdimStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            DdimStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

fn out_ptr<T>(p: *mut T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(())
    }
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Array2<f64>, Fail> {
    Ok(Array2::from_shape_vec((rows, cols), data.to_vec()).map_err(|e| Error::Parameter(e.to_string()))?)
}

fn write_out(out: &mut [f64], m: &Array2<f64>) {
    for (o, v) in out.iter_mut().zip(m.iter()) {
        *o = *v;
    }
}

fn check_schedule(den: &DdimDenoiser, s: &DdimSchedule) -> Result<(), Fail> {
    if den.schedule_hash != s.inner.hash() {
        return Err(Error::Parameter("denoiser was built for a different schedule".into()).into());
    }
    Ok(())
}

fn check_dim(den: &DdimDenoiser, d: usize) -> Result<(), Fail> {
    if den.dim != d {
        return Err(Error::Shape { expected: vec![den.dim], got: vec![d] }.into());
    }
    Ok(())
}

fn mode(m: DdimMode) -> SubsequenceMode {
    match m {
        DdimMode::Linear => SubsequenceMode::Linear,
        DdimMode::Quadratic => SubsequenceMode::Quadratic,
    }
}

/// Message for the most recent failure on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ddim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ddim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Linear `β` schedule with `steps` timesteps.
#[no_mangle]
pub unsafe extern "C" fn ddim_schedule_linear(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut DdimSchedule,
) -> DdimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let inner = NoiseSchedule::linear_beta(steps, beta_start, beta_end)?;
        *out = Box::into_raw(Box::new(DdimSchedule { inner }));
        Ok(())
    })
}

/// Schedule from cumulative `α_0..α_T` (`α_0 = 1` may be omitted).
#[no_mangle]
pub unsafe extern "C" fn ddim_schedule_from_alphas(
    alphas: *const f64,
    len: usize,
    out: *mut *mut DdimSchedule,
) -> DdimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let a = slice(alphas, len, "alphas")?;
        let inner = NoiseSchedule::from_alphas(a.to_vec())?;
        *out = Box::into_raw(Box::new(DdimSchedule { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ddim_schedule_len(schedule: *const DdimSchedule, out: *mut usize) -> DdimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = handle(schedule, "schedule")?.inner.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ddim_schedule_alpha(schedule: *const DdimSchedule, t: usize, out: *mut f64) -> DdimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = handle(schedule, "schedule")?.inner.alpha(t)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ddim_schedule_free(schedule: *mut DdimSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Exact denoiser for an isotropic Gaussian mixture with `k` components in
/// `d` dimensions; `means` is `k × d`.
#[no_mangle]
pub unsafe extern "C" fn ddim_denoiser_mixture(
    schedule: *const DdimSchedule,
    weights: *const f64,
    k: usize,
    means: *const f64,
    d: usize,
    component_std: f64,
    out: *mut *mut DdimDenoiser,
) -> DdimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let s = handle(schedule, "schedule")?;
        let w = slice(weights, k, "weights")?;
        let m = slice(means, k * d, "means")?;
        let spec = MixtureSpec::new(w.to_vec(), m.chunks(d.max(1)).map(<[f64]>::to_vec).collect(), component_std)?;
        let inner = AnalyticDenoiser::new(&DataSpec::Mixture(spec), s.inner.clone())?;
        *out = Box::into_raw(Box::new(DdimDenoiser { inner: Box::new(inner), dim: d, schedule_hash: s.inner.hash() }));
        Ok(())
    })
}

/// Exact denoiser for the empirical distribution of `n` points (`n × d`).
#[no_mangle]
pub unsafe extern "C" fn ddim_denoiser_points(
    schedule: *const DdimSchedule,
    points: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut DdimDenoiser,
) -> DdimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let s = handle(schedule, "schedule")?;
        let p = slice(points, n * d, "points")?;
        let spec = DataSpec::Points { points: p.chunks(d.max(1)).map(<[f64]>::to_vec).collect() };
        let inner = AnalyticDenoiser::new(&spec, s.inner.clone())?;
        *out = Box::into_raw(Box::new(DdimDenoiser { inner: Box::new(inner), dim: d, schedule_hash: s.inner.hash() }));
        Ok(())
    })
}

/// Loads a trained network checkpoint; its schedule hash must match `schedule`.
#[no_mangle]
pub unsafe extern "C" fn ddim_denoiser_load(
    schedule: *const DdimSchedule,
    path: *const c_char,
    out: *mut *mut DdimDenoiser,
) -> DdimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let s = handle(schedule, "schedule")?;
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|e| Error::Parameter(format!("path is not UTF-8: {e}")))?;
        let (mlp, header) = Mlp::load(Path::new(path))?;
        if header.schedule_hash != s.inner.hash() {
            return Err(Error::Parameter(format!(
                "checkpoint schedule {} does not match {}",
                header.schedule_hash,
                s.inner.hash()
            ))
            .into());
        }
        let dim = mlp.shape().dim;
        *out = Box::into_raw(Box::new(DdimDenoiser { inner: Box::new(mlp), dim, schedule_hash: header.schedule_hash }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ddim_denoiser_dim(denoiser: *const DdimDenoiser, out: *mut usize) -> DdimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = handle(denoiser, "denoiser")?.dim;
        Ok(())
    })
}

/// Noise prediction for `n` states at timestep `t`; `x` and `out` are `n × d`.
#[no_mangle]
pub unsafe extern "C" fn ddim_denoiser_eval(
    denoiser: *const DdimDenoiser,
    x: *const f64,
    n: usize,
    d: usize,
    t: usize,
    out: *mut f64,
) -> DdimStatus {
    guard(|| {
        let den = handle(denoiser, "denoiser")?;
        check_dim(den, d)?;
        let x = matrix(slice(x, n * d, "x")?, n, d)?;
        let out = slice_mut(out, n * d, "out")?;
        write_out(out, &den.inner.eval(x.view(), t)?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ddim_denoiser_free(denoiser: *mut DdimDenoiser) {
    if !denoiser.is_null() {
        drop(Box::from_raw(denoiser));
    }
}

/// Standard-normal latents for chains `first_chain..first_chain + n`.
#[no_mangle]
pub unsafe extern "C" fn ddim_draw_latents(
    schedule: *const DdimSchedule,
    seed: u64,
    first_chain: u64,
    n: usize,
    d: usize,
    out: *mut f64,
) -> DdimStatus {
    guard(|| {
        let s = handle(schedule, "schedule")?;
        let out = slice_mut(out, n * d, "out")?;
        write_out(out, &draw_latents(&s.inner, &NoiseStream::new(seed), first_chain, n, d)?.data);
        Ok(())
    })
}

/// Runs `steps` generative transitions from latents `x_t` (`n × d`) to
/// samples in `out`. Row `r` uses the noise of chain `first_chain + r`.
#[no_mangle]
pub unsafe extern "C" fn ddim_sample(
    schedule: *const DdimSchedule,
    denoiser: *const DdimDenoiser,
    x_t: *const f64,
    n: usize,
    d: usize,
    steps: usize,
    mode: DdimMode,
    policy: DdimPolicy,
    seed: u64,
    first_chain: u64,
    out: *mut f64,
) -> DdimStatus {
    guard(|| {
        let s = handle(schedule, "schedule")?;
        let den = handle(denoiser, "denoiser")?;
        check_schedule(den, s)?;
        check_dim(den, d)?;
        let x = StateBatch::new(matrix(slice(x_t, n * d, "x_t")?, n, d)?, s.inner.len())?;
        let out = slice_mut(out, n * d, "out")?;
        let traj = select_subsequence(s.inner.len(), steps, self::mode(mode))?;
        let policy = match policy.kind {
            DdimPolicyKind::Eta => SigmaPolicy::Eta(policy.eta),
            DdimPolicyKind::SigmaHat => SigmaPolicy::SigmaHat,
        };
        let r = run_trajectory(&s.inner, &x, &traj, &*den.inner, &policy, &NoiseStream::new(seed), first_chain, false)?;
        write_out(out, &r.x0.data);
        Ok(())
    })
}

/// Deterministic encoding of data `x0` (`n × d`) to latents `x_T` in `out`.
#[no_mangle]
pub unsafe extern "C" fn ddim_encode(
    schedule: *const DdimSchedule,
    denoiser: *const DdimDenoiser,
    x0: *const f64,
    n: usize,
    d: usize,
    steps: usize,
    mode: DdimMode,
    out: *mut f64,
) -> DdimStatus {
    guard(|| {
        let s = handle(schedule, "schedule")?;
        let den = handle(denoiser, "denoiser")?;
        check_schedule(den, s)?;
        check_dim(den, d)?;
        let x = StateBatch::new(matrix(slice(x0, n * d, "x0")?, n, d)?, 0)?;
        let out = slice_mut(out, n * d, "out")?;
        let traj = select_subsequence(s.inner.len(), steps, self::mode(mode))?;
        write_out(out, &encode(&s.inner, &x, &traj, &*den.inner)?.data);
        Ok(())
    })
}

/// Deterministic decoding of latents `x_t` (`n × d`) to data in `out`.
#[no_mangle]
pub unsafe extern "C" fn ddim_decode(
    schedule: *const DdimSchedule,
    denoiser: *const DdimDenoiser,
    x_t: *const f64,
    n: usize,
    d: usize,
    steps: usize,
    mode: DdimMode,
    out: *mut f64,
) -> DdimStatus {
    guard(|| {
        let s = handle(schedule, "schedule")?;
        let den = handle(denoiser, "denoiser")?;
        check_schedule(den, s)?;
        check_dim(den, d)?;
        let x = StateBatch::new(matrix(slice(x_t, n * d, "x_t")?, n, d)?, s.inner.len())?;
        let out = slice_mut(out, n * d, "out")?;
        let traj = select_subsequence(s.inner.len(), steps, self::mode(mode))?;
        write_out(out, &integrate(&s.inner, &x, &traj, &*den.inner, Integrator::Ddim)?.data);
        Ok(())
    })
}

/// Spherical interpolation between two `d`-vectors.
#[no_mangle]
pub unsafe extern "C" fn ddim_slerp(a: *const f64, b: *const f64, d: usize, alpha: f64, out: *mut f64) -> DdimStatus {
    guard(|| {
        let a = slice(a, d, "a")?;
        let b = slice(b, d, "b")?;
        let out = slice_mut(out, d, "out")?;
        out.copy_from_slice(&slerp(a, b, alpha)?);
        Ok(())
    })
}
