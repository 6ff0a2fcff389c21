//! C ABI over `blowuplab`.
//!
//! Every entry point returns a [`BlxStatus`]; on failure the message is
//! available from [`blx_last_error`] on the same thread. Objects are opaque
//! handles created by `*_new` and released by the matching `*_free`.
//! Panics never cross the boundary; they surface as `BLX_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use blowuplab::angular::{self, JlClass};
use blowuplab::simulator::{self, EvolveOptions, Model, ModelOptions, ShootOptions, SimGridOptions, Simulator, Trajectory};
use blowuplab::spectral::Eigensystem;
use blowuplab::Error;

/// Result of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// `(n, q)` is not in the supercritical range the call needs.
    NotSupercritical = 3,
    NonConvergence = 4,
    Resolution = 5,
    /// Any other numerical failure (singular systems, positivity loss, ...).
    Numerical = 6,
    OutOfRange = 7,
    Panic = 8,
}

/// Joseph-Lundgren class of `(n, q)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlxClass {
    Subcritical = 0,
    Critical = 1,
    Supercritical = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BlxClassification {
    pub k: f64,
    pub c_h: f64,
    /// A `BlxClass` value.
    pub jl_class: i32,
    pub kappa1: f64,
    /// NaN unless supercritical.
    pub mu1: f64,
    pub gamma: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BlxMode {
    pub i: u32,
    pub j: u32,
    pub kappa: f64,
    pub lambda: f64,
    pub radial_exponent: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BlxFrame {
    pub ell: u32,
    pub pi_len: u32,
    pub m: f64,
    pub gamma: f64,
    pub mu1: f64,
    pub lambda_star: f64,
    pub omega: f64,
    pub s1: f64,
    pub alpha: f64,
    pub m0: f64,
    pub d_ball: f64,
    /// Growth rate `m omega` of the sup norm.
    pub target_rate: f64,
}

/// Grid and stepping overrides; zero fields take the library defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BlxRunOptions {
    pub horizon: f64,
    pub dt: f64,
    pub ntheta: u32,
    pub stop_on_exit: bool,
}

pub struct BlxEigensystem(Eigensystem);
pub struct BlxModel(Model);
pub struct BlxTrajectory(Trajectory);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> BlxStatus {
    match e {
        Error::Domain(_) | Error::Config(_) | Error::GridMismatch(_) => BlxStatus::InvalidArgument,
        Error::NotSupercritical(_) => BlxStatus::NotSupercritical,
        Error::NonConvergence(_) | Error::NewtonDivergence { .. } | Error::ProfileNotFound(_) => BlxStatus::NonConvergence,
        Error::Resolution(_) => BlxStatus::Resolution,
        _ => BlxStatus::Numerical,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (BlxStatus, String)>) -> BlxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BlxStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            BlxStatus::Panic
        }
    }
}

fn lib<T>(r: blowuplab::Result<T>) -> Result<T, (BlxStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, (BlxStatus, String)> {
    // SAFETY: callers pass either NULL or a pointer obtained from this library
    unsafe { p.as_ref() }.ok_or_else(|| (BlxStatus::NullPointer, format!("{what} is NULL")))
}

fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (BlxStatus, String)> {
    // SAFETY: callers pass either NULL or a writable pointer
    unsafe { p.as_mut() }.ok_or_else(|| (BlxStatus::NullPointer, format!("{what} is NULL")))
}

fn problem(n: u32, q: f64) -> Result<angular::Problem, (BlxStatus, String)> {
    lib(angular::Problem::new(n as usize, q))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn blx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn blx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `K`, `c_H`, class and the first angular eigenvalue for `(n, q)`.
#[no_mangle]
pub unsafe extern "C" fn blx_classify(n: u32, q: f64, out: *mut BlxClassification) -> BlxStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        problem(n, q)?;
        let cell = angular::classify_point(n as usize, q, 400);
        if let Some(e) = cell.error {
            return Err((BlxStatus::NonConvergence, e));
        }
        let class = match cell.class.expect("classified when no error") {
            JlClass::Subcritical => BlxClass::Subcritical,
            JlClass::Critical => BlxClass::Critical,
            JlClass::Supercritical => BlxClass::Supercritical,
        };
        *out = BlxClassification { k: cell.k, c_h: cell.c_h, jl_class: class as i32, kappa1: cell.kappa1, mu1: cell.mu1, gamma: cell.gamma };
        Ok(())
    })
}

/// Eigenvalue inventory with at least `min_modes` modes.
#[no_mangle]
pub unsafe extern "C" fn blx_eigensystem_new(n: u32, q: f64, min_modes: u32, out: *mut *mut BlxEigensystem) -> BlxStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let p = problem(n, q)?;
        let es = lib(Eigensystem::build(&p, 400, None, min_modes.max(1) as usize))?;
        *out = Box::into_raw(Box::new(BlxEigensystem(es)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn blx_eigensystem_free(h: *mut BlxEigensystem) {
    if !h.is_null() {
        // SAFETY: `h` came from `blx_eigensystem_new` and is freed once
        drop(unsafe { Box::from_raw(h) });
    }
}

#[no_mangle]
pub unsafe extern "C" fn blx_eigensystem_len(h: *const BlxEigensystem, len: *mut usize) -> BlxStatus {
    guard(|| {
        *out_ptr(len, "len")? = non_null(h, "eigensystem")?.0.modes.len();
        Ok(())
    })
}

/// Mode `index` in increasing order of `lambda`.
#[no_mangle]
pub unsafe extern "C" fn blx_eigensystem_mode(h: *const BlxEigensystem, index: usize, out: *mut BlxMode) -> BlxStatus {
    guard(|| {
        let es = &non_null(h, "eigensystem")?.0;
        let out = out_ptr(out, "out")?;
        let m = es
            .modes
            .get(index)
            .ok_or_else(|| (BlxStatus::OutOfRange, format!("mode {index} of {}", es.modes.len())))?;
        *out = BlxMode { i: m.i as u32, j: m.j as u32, kappa: m.kappa, lambda: m.lambda, radial_exponent: m.exponent.value };
        Ok(())
    })
}

/// Spectral frame, stationary solution and calibration for `(n, q)` with the
/// default parameters.
#[no_mangle]
pub unsafe extern "C" fn blx_model_new(n: u32, q: f64, out: *mut *mut BlxModel) -> BlxStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let p = problem(n, q)?;
        let model = lib(Model::build(&p, &ModelOptions::default()))?;
        *out = Box::into_raw(Box::new(BlxModel(model)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn blx_model_free(h: *mut BlxModel) {
    if !h.is_null() {
        // SAFETY: `h` came from `blx_model_new` and is freed once
        drop(unsafe { Box::from_raw(h) });
    }
}

#[no_mangle]
pub unsafe extern "C" fn blx_model_frame(h: *const BlxModel, out: *mut BlxFrame) -> BlxStatus {
    guard(|| {
        let f = &non_null(h, "model")?.0.frame;
        *out_ptr(out, "out")? = BlxFrame {
            ell: f.ell as u32,
            pi_len: f.pi.len() as u32,
            m: f.m,
            gamma: f.gamma,
            mu1: f.mu1,
            lambda_star: f.lambda_star,
            omega: f.omega,
            s1: f.s1,
            alpha: f.alpha,
            m0: f.m0,
            d_ball: f.d_ball(),
            target_rate: f.target_rate(),
        };
        Ok(())
    })
}

fn simulator<'a>(model: &'a Model, opts: &BlxRunOptions) -> Result<Simulator<'a>, (BlxStatus, String)> {
    let gd = SimGridOptions::default();
    let grid = SimGridOptions {
        horizon: if opts.horizon > 0.0 { opts.horizon } else { gd.horizon },
        nt: if opts.ntheta > 0 { opts.ntheta as usize } else { gd.nt },
        ..gd
    };
    let ed = EvolveOptions::default();
    let evolve = EvolveOptions { dt: if opts.dt > 0.0 { opts.dt } else { ed.dt }, stop_on_exit: opts.stop_on_exit, ..ed };
    lib(Simulator::new(model, &grid, evolve))
}

fn read_opts(opts: *const BlxRunOptions) -> BlxRunOptions {
    // SAFETY: NULL or a readable struct
    unsafe { opts.as_ref() }.copied().unwrap_or_default()
}

/// Evolve the constructed initial data with coefficients `d[0..d_len]`
/// (one per unstable mode) from `s1` to `s_end`. `opts` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn blx_simulate(
    model: *const BlxModel,
    d: *const f64,
    d_len: usize,
    s_end: f64,
    opts: *const BlxRunOptions,
    out: *mut *mut BlxTrajectory,
) -> BlxStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let model = &non_null(model, "model")?.0;
        if d_len != model.frame.pi.len() {
            return Err((BlxStatus::InvalidArgument, format!("d has {d_len} entries, expected {}", model.frame.pi.len())));
        }
        let d = if d_len == 0 { Vec::new() } else { non_null(d, "d").map(|p| unsafe { std::slice::from_raw_parts(p, d_len) }.to_vec())? };
        let sim = simulator(model, &read_opts(opts))?;
        let state = lib(sim.initial_state(&d))?;
        let traj = lib(sim.evolve(&state, s_end))?;
        *out = Box::into_raw(Box::new(BlxTrajectory(traj)));
        Ok(())
    })
}

/// Solve `P(d; s2) = 0`; writes `d*` into `d_out[0..d_len]`.
#[no_mangle]
pub unsafe extern "C" fn blx_shoot(
    model: *const BlxModel,
    s2: f64,
    opts: *const BlxRunOptions,
    d_out: *mut f64,
    d_len: usize,
) -> BlxStatus {
    guard(|| {
        let model = &non_null(model, "model")?.0;
        if d_len != model.frame.pi.len() {
            return Err((BlxStatus::InvalidArgument, format!("d_out has {d_len} entries, expected {}", model.frame.pi.len())));
        }
        let d_out = out_ptr(d_out, "d_out")?;
        let sim = simulator(model, &read_opts(opts))?;
        let (report, _) = lib(sim.shoot(&ShootOptions { s2, ..Default::default() }))?;
        if !report.converged {
            return Err((BlxStatus::NonConvergence, format!("shooting stopped at |P| = {:?}", report.p_star)));
        }
        // SAFETY: the caller provides `d_len` writable doubles
        unsafe { std::slice::from_raw_parts_mut(d_out as *mut f64, d_len) }.copy_from_slice(&report.d_star);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn blx_trajectory_free(h: *mut BlxTrajectory) {
    if !h.is_null() {
        // SAFETY: `h` came from `blx_simulate` and is freed once
        drop(unsafe { Box::from_raw(h) });
    }
}

#[no_mangle]
pub unsafe extern "C" fn blx_trajectory_len(h: *const BlxTrajectory, len: *mut usize) -> BlxStatus {
    guard(|| {
        *out_ptr(len, "len")? = non_null(h, "trajectory")?.0.points.len();
        Ok(())
    })
}

/// Time and sup norm of output point `index`.
#[no_mangle]
pub unsafe extern "C" fn blx_trajectory_point(h: *const BlxTrajectory, index: usize, s: *mut f64, sup: *mut f64) -> BlxStatus {
    guard(|| {
        let t = &non_null(h, "trajectory")?.0;
        let pt = t
            .points
            .get(index)
            .ok_or_else(|| (BlxStatus::OutOfRange, format!("point {index} of {}", t.points.len())))?;
        *out_ptr(s, "s")? = pt.s;
        *out_ptr(sup, "sup")? = pt.sup;
        Ok(())
    })
}

/// Whether the run left the region; the exit time goes to `exit_s`.
#[no_mangle]
pub unsafe extern "C" fn blx_trajectory_exit(h: *const BlxTrajectory, exited: *mut bool, exit_s: *mut f64) -> BlxStatus {
    guard(|| {
        let t = &non_null(h, "trajectory")?.0;
        *out_ptr(exited, "exited")? = t.exit_s.is_some();
        *out_ptr(exit_s, "exit_s")? = t.exit_s.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Least-squares growth rate of `log sup` over the part of the run that
/// stayed in the region.
#[no_mangle]
pub unsafe extern "C" fn blx_trajectory_rate(
    h: *const BlxTrajectory,
    model: *const BlxModel,
    slope: *mut f64,
    stderr: *mut f64,
) -> BlxStatus {
    guard(|| {
        let t = &non_null(h, "trajectory")?.0;
        let model = &non_null(model, "model")?.0;
        let fit = lib(simulator::rate_fit_trajectory(t, &model.frame))?;
        *out_ptr(slope, "slope")? = fit.slope;
        *out_ptr(stderr, "stderr")? = fit.stderr;
        Ok(())
    })
}
