//! C ABI for theta-lab.
//!
//! Objects cross the boundary as opaque handles created by `tl_*_new` and
//! released by the matching `tl_*_free`. Every fallible call returns an
//! `int32_t` status, `TL_OK` on success; the message of the last failure on
//! the calling thread is available from [`tl_last_error`]. Outputs are
//! written only on success.

use num_complex::Complex64 as C64;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use theta_lab::cli::{run_scenario, ResidualReport, Scenario};
use theta_lab::pole_systems::{cm_flow, cm_hamiltonian, lax_residual, spectral_invariants, CMState};
use theta_lab::siegel_theta::{addition_residual, theta_eval, PeriodMatrix, TruncationPolicy};
use theta_lab::weierstrass::EllipticLattice;
use theta_lab::Error;

pub const TL_OK: i32 = 0;
pub const TL_ERR_NULL_POINTER: i32 = 1;
pub const TL_ERR_INVALID_UTF8: i32 = 2;
pub const TL_ERR_PANIC: i32 = 3;
pub const TL_ERR_INVALID_PERIOD_MATRIX: i32 = 10;
pub const TL_ERR_TRUNCATION_INSUFFICIENT: i32 = 11;
pub const TL_ERR_ALL_COORDINATES_VANISH: i32 = 12;
pub const TL_ERR_POLE_AT_LATTICE_POINT: i32 = 13;
pub const TL_ERR_NEAR_SINGULAR_INPUT: i32 = 14;
pub const TL_ERR_INVALID_LATTICE: i32 = 15;
pub const TL_ERR_COLLISION_DETECTED: i32 = 16;
pub const TL_ERR_STEP_REJECTED: i32 = 17;
pub const TL_ERR_DEGENERATE_EIGENVALUE: i32 = 18;
pub const TL_ERR_BRANCH_AMBIGUITY: i32 = 19;
pub const TL_ERR_BOUNDARY_ZERO: i32 = 20;
pub const TL_ERR_NON_SIMPLE_ZERO: i32 = 21;
pub const TL_ERR_TRACKING_LOST: i32 = 22;
pub const TL_ERR_INSUFFICIENT_ZEROS: i32 = 23;
pub const TL_ERR_GRID_HITS_DIVISOR: i32 = 24;
pub const TL_ERR_FACTOR_VANISHES: i32 = 25;
pub const TL_ERR_FIT_DEGENERATE: i32 = 26;
pub const TL_ERR_SHIFT_INVARIANT_DIVISOR: i32 = 27;
pub const TL_ERR_RESIDUE_OBSTRUCTION: i32 = 28;
pub const TL_ERR_DIVISOR_HIT: i32 = 29;
pub const TL_ERR_INVALID_CURVE_DATUM: i32 = 30;
pub const TL_ERR_CONFIG_INVALID: i32 = 31;
pub const TL_ERR_INVALID_ARGUMENT: i32 = 32;
pub const TL_ERR_IO: i32 = 33;

/// A complex number laid out as two doubles.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TlComplex {
    pub re: f64,
    pub im: f64,
}

impl From<TlComplex> for C64 {
    fn from(z: TlComplex) -> Self {
        C64::new(z.re, z.im)
    }
}

impl From<C64> for TlComplex {
    fn from(z: C64) -> Self {
        Self { re: z.re, im: z.im }
    }
}

/// A validated period matrix.
pub struct TlPeriodMatrix {
    inner: PeriodMatrix,
}

/// An elliptic lattice with half-periods `omega1`, `omega2`.
pub struct TlLattice {
    inner: EllipticLattice,
}

/// A Calogero-Moser state.
pub struct TlCmState {
    inner: CMState,
}

/// A residual report together with its JSON text.
pub struct TlReport {
    inner: ResidualReport,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::InvalidPeriodMatrix(_) => TL_ERR_INVALID_PERIOD_MATRIX,
        Error::TruncationInsufficient(_) => TL_ERR_TRUNCATION_INSUFFICIENT,
        Error::AllCoordinatesVanish => TL_ERR_ALL_COORDINATES_VANISH,
        Error::PoleAtLatticePoint(_) => TL_ERR_POLE_AT_LATTICE_POINT,
        Error::NearSingularInput(_) => TL_ERR_NEAR_SINGULAR_INPUT,
        Error::InvalidLattice(_) => TL_ERR_INVALID_LATTICE,
        Error::CollisionDetected(_) => TL_ERR_COLLISION_DETECTED,
        Error::StepRejected(_) => TL_ERR_STEP_REJECTED,
        Error::DegenerateEigenvalue(_) => TL_ERR_DEGENERATE_EIGENVALUE,
        Error::BranchAmbiguity(_) => TL_ERR_BRANCH_AMBIGUITY,
        Error::BoundaryZero(_) => TL_ERR_BOUNDARY_ZERO,
        Error::NonSimpleZero(_) => TL_ERR_NON_SIMPLE_ZERO,
        Error::TrackingLost(_) => TL_ERR_TRACKING_LOST,
        Error::InsufficientZeros(_) => TL_ERR_INSUFFICIENT_ZEROS,
        Error::GridHitsDivisor(_) => TL_ERR_GRID_HITS_DIVISOR,
        Error::FactorVanishes(_) => TL_ERR_FACTOR_VANISHES,
        Error::FitDegenerate(_) => TL_ERR_FIT_DEGENERATE,
        Error::ShiftInvariantDivisor(_) => TL_ERR_SHIFT_INVARIANT_DIVISOR,
        Error::ResidueObstruction { .. } => TL_ERR_RESIDUE_OBSTRUCTION,
        Error::DivisorHit(_) => TL_ERR_DIVISOR_HIT,
        Error::InvalidCurveDatum(_) => TL_ERR_INVALID_CURVE_DATUM,
        Error::ConfigInvalid(_) => TL_ERR_CONFIG_INVALID,
        Error::InvalidArgument(_) => TL_ERR_INVALID_ARGUMENT,
        Error::Io(_) => TL_ERR_IO,
    }
}

enum Fail {
    Null(&'static str),
    Utf8,
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TL_OK,
        Ok(Err(Fail::Null(what))) => {
            set_last_error(&format!("null pointer: {what}"));
            TL_ERR_NULL_POINTER
        }
        Ok(Err(Fail::Utf8)) => {
            set_last_error("string is not valid UTF-8");
            TL_ERR_INVALID_UTF8
        }
        Ok(Err(Fail::Lib(e))) => {
            set_last_error(&e.to_string());
            code_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic");
            TL_ERR_PANIC
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out<T>(p: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(v);
    Ok(())
}

fn cvec(z: &[TlComplex]) -> Vec<C64> {
    z.iter().map(|&v| v.into()).collect()
}

fn policy(tol: f64) -> Result<TruncationPolicy, Fail> {
    if tol > 0.0 {
        Ok(TruncationPolicy::with_tol(tol))
    } else {
        Err(Fail::Lib(Error::InvalidArgument("tolerance must be positive".into())))
    }
}

/// Message of the last failed call on this thread; empty when none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ---------------------------------------------------------------------------
// Period matrices and theta

/// Creates a `g x g` period matrix from row-major entries.
///
/// # Safety
/// `entries` must point to `g * g` values and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn tl_period_matrix_new(g: usize, entries: *const TlComplex, out_handle: *mut *mut TlPeriodMatrix) -> i32 {
    guard(|| {
        let e = slice(entries, g * g, "entries")?;
        let inner = PeriodMatrix::new(g, cvec(e))?;
        out(out_handle, Box::into_raw(Box::new(TlPeriodMatrix { inner })), "out_handle")
    })
}

/// Releases a period matrix; null is ignored.
///
/// # Safety
/// `b` must come from [`tl_period_matrix_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_period_matrix_free(b: *mut TlPeriodMatrix) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Genus of a period matrix, 0 for null.
///
/// # Safety
/// `b` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tl_period_matrix_genus(b: *const TlPeriodMatrix) -> usize {
    b.as_ref().map_or(0, |b| b.inner.genus())
}

/// Riemann theta function at `z` (length `g`) with absolute tolerance `tol`.
///
/// # Safety
/// `z` must point to `genus` values; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_theta_eval(b: *const TlPeriodMatrix, z: *const TlComplex, tol: f64, result: *mut TlComplex) -> i32 {
    guard(|| {
        let b = &get(b, "b")?.inner;
        let z = cvec(slice(z, b.genus(), "z")?);
        let v = theta_eval(&z, b, &policy(tol)?)?;
        out(result, v.into(), "result")
    })
}

/// Defect of the theta addition formula at `(z, w)`.
///
/// # Safety
/// `z` and `w` must point to `genus` values; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_addition_residual(
    b: *const TlPeriodMatrix,
    z: *const TlComplex,
    w: *const TlComplex,
    tol: f64,
    result: *mut f64,
) -> i32 {
    guard(|| {
        let b = &get(b, "b")?.inner;
        let z = cvec(slice(z, b.genus(), "z")?);
        let w = cvec(slice(w, b.genus(), "w")?);
        let r = addition_residual(&z, &w, b, &policy(tol)?)?;
        out(result, r, "result")
    })
}

// ---------------------------------------------------------------------------
// Elliptic lattices

/// # Safety
/// `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_lattice_new(omega1: TlComplex, omega2: TlComplex, out_handle: *mut *mut TlLattice) -> i32 {
    guard(|| {
        let inner = EllipticLattice::new(omega1.into(), omega2.into())?;
        out(out_handle, Box::into_raw(Box::new(TlLattice { inner })), "out_handle")
    })
}

/// # Safety
/// `lat` must come from [`tl_lattice_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_lattice_free(lat: *mut TlLattice) {
    if !lat.is_null() {
        drop(Box::from_raw(lat));
    }
}

/// Weierstrass `sigma`, `zeta` and `wp` at `x`.
///
/// # Safety
/// `lat` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_lattice_weierstrass(
    lat: *const TlLattice,
    x: TlComplex,
    sigma: *mut TlComplex,
    zeta: *mut TlComplex,
    wp: *mut TlComplex,
) -> i32 {
    guard(|| {
        let lat = &get(lat, "lat")?.inner;
        let x: C64 = x.into();
        let v = lat.values(x)?;
        let s = lat.sigma(x);
        if sigma.is_null() || zeta.is_null() || wp.is_null() {
            return Err(Fail::Null("sigma, zeta or wp"));
        }
        out(sigma, s.into(), "sigma")?;
        out(zeta, v.zeta.into(), "zeta")?;
        out(wp, v.wp.into(), "wp")
    })
}

/// The Lame kernel `Phi(x, z)`.
///
/// # Safety
/// `lat` must be a live handle; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_lattice_phi(lat: *const TlLattice, x: TlComplex, z: TlComplex, result: *mut TlComplex) -> i32 {
    guard(|| {
        let lat = &get(lat, "lat")?.inner;
        let v = lat.phi_lame(x.into(), z.into())?;
        out(result, v.into(), "result")
    })
}

// ---------------------------------------------------------------------------
// Calogero-Moser

/// Creates a state of `n` particles.
///
/// # Safety
/// `q` and `p` must point to `n` values; `lat` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tl_cm_state_new(
    lat: *const TlLattice,
    n: usize,
    q: *const TlComplex,
    p: *const TlComplex,
    out_handle: *mut *mut TlCmState,
) -> i32 {
    guard(|| {
        let lat = get(lat, "lat")?.inner;
        let q = cvec(slice(q, n, "q")?);
        let p = cvec(slice(p, n, "p")?);
        let inner = CMState::new(q, p, lat)?;
        out(out_handle, Box::into_raw(Box::new(TlCmState { inner })), "out_handle")
    })
}

/// # Safety
/// `s` must come from a `tl_cm_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_cm_state_free(s: *mut TlCmState) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of particles, 0 for null.
///
/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tl_cm_state_len(s: *const TlCmState) -> usize {
    s.as_ref().map_or(0, |s| s.inner.n())
}

/// Copies positions and momenta into `q` and `p` (length `n` each).
///
/// # Safety
/// `q` and `p` must have room for `tl_cm_state_len(s)` values.
#[no_mangle]
pub unsafe extern "C" fn tl_cm_state_get(s: *const TlCmState, q: *mut TlComplex, p: *mut TlComplex) -> i32 {
    guard(|| {
        let s = &get(s, "s")?.inner;
        if q.is_null() || p.is_null() {
            return Err(Fail::Null("q or p"));
        }
        for i in 0..s.n() {
            q.add(i).write(s.q[i].into());
            p.add(i).write(s.p[i].into());
        }
        Ok(())
    })
}

/// Hamiltonian of the state.
///
/// # Safety
/// `s` must be a live handle; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_cm_hamiltonian(s: *const TlCmState, result: *mut TlComplex) -> i32 {
    guard(|| {
        let v = cm_hamiltonian(&get(s, "s")?.inner)?;
        out(result, v.into(), "result")
    })
}

/// Relative defect of the Lax equation at spectral parameter `z`.
///
/// # Safety
/// `s` must be a live handle; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_cm_lax_residual(s: *const TlCmState, z: TlComplex, result: *mut f64) -> i32 {
    guard(|| {
        let r = lax_residual(&get(s, "s")?.inner, z.into())?;
        out(result, r, "result")
    })
}

/// Power traces `tr L(z)^k`, `k = 1..=kmax`, written to `traces`.
///
/// # Safety
/// `traces` must have room for `kmax` values.
#[no_mangle]
pub unsafe extern "C" fn tl_cm_power_traces(s: *const TlCmState, z: TlComplex, kmax: usize, traces: *mut TlComplex) -> i32 {
    guard(|| {
        let inv = spectral_invariants(&get(s, "s")?.inner, z.into(), kmax)?;
        if kmax > 0 && traces.is_null() {
            return Err(Fail::Null("traces"));
        }
        for (i, v) in inv.power_traces.iter().enumerate() {
            traces.add(i).write((*v).into());
        }
        Ok(())
    })
}

/// Integrates `steps` RK4 steps of size `dt` and returns the final state
/// as a new handle.
///
/// # Safety
/// `s` must be a live handle; `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_cm_flow(s: *const TlCmState, dt: f64, steps: usize, out_handle: *mut *mut TlCmState) -> i32 {
    guard(|| {
        let tr = cm_flow(&get(s, "s")?.inner, dt, steps)?;
        let inner = tr.last().cloned().ok_or(Fail::Lib(Error::InvalidArgument("empty trajectory".into())))?;
        out(out_handle, Box::into_raw(Box::new(TlCmState { inner })), "out_handle")
    })
}

// ---------------------------------------------------------------------------
// Scenarios

/// Validates and runs a scenario given as JSON text. A report is returned
/// even when residuals fail; check [`tl_report_pass`].
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tl_run_scenario_json(json: *const c_char, out_handle: *mut *mut TlReport) -> i32 {
    guard(|| {
        if json.is_null() {
            return Err(Fail::Null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|_| Fail::Utf8)?;
        let sc = Scenario::from_json(text)?;
        let inner = run_scenario(&sc)?.report;
        let json = CString::new(inner.to_json()).map_err(|_| Fail::Utf8)?;
        out(out_handle, Box::into_raw(Box::new(TlReport { inner, json })), "out_handle")
    })
}

/// 1 when every residual passed, 0 otherwise or for null.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tl_report_pass(r: *const TlReport) -> i32 {
    r.as_ref().map_or(0, |r| r.inner.pass as i32)
}

/// Largest upper-bound residual, NaN when there is none.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tl_report_max_residual(r: *const TlReport) -> f64 {
    r.as_ref().and_then(|r| r.inner.max_residual()).unwrap_or(f64::NAN)
}

/// JSON text of the report, owned by the handle.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tl_report_json(r: *const TlReport) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

/// # Safety
/// `r` must come from [`tl_run_scenario_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_report_free(r: *mut TlReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}
