//! C ABI over `lane_emden_lab`.
//!
//! Every entry point returns an [`LeStatus`]; on failure the message is kept
//! per thread and read back with [`le_last_error`]. Solutions live behind the
//! opaque [`LeOptimizer`] handle, released with [`le_optimizer_free`].

use lane_emden_lab::free_energy_flow::{gaussian, theory_values, FlowOperator, Regime, StopReason, StopSpec};
use lane_emden_lab::hessian_spec::HessianContext;
use lane_emden_lab::optimizer::{auto_r_max, derived_constants, solve_optimizer, OptimizerSolution, SolveOptions};
use lane_emden_lab::radial_core::{make_grid, Grading, Params};
use lane_emden_lab::scattering_diag::{
    default_t_grid, fractional_hamiltonian, local_hamiltonian, monotonicity_report, scattering_problem_from, solve_scattering,
};
use lane_emden_lab::stability_lab::{quotient_curve, random_direction, PerturbationSpec};
use lane_emden_lab::LabError;
use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeStatus {
    Ok = 0,
    NullPointer = 1,
    Precondition = 2,
    NonConvergence = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeRegime {
    Subcritical = 0,
    CriticalBounded = 1,
    Unbounded = 2,
}

/// Optimizer solution handle.
pub struct LeOptimizer {
    sol: OptimizerSolution,
    hessian: Option<HessianContext>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LeConstants {
    pub a: f64,
    pub mu: f64,
    pub p_c: f64,
    pub s: f64,
    pub alpha: f64,
    pub tau: f64,
    pub threshold: f64,
    pub support_edge: f64,
    pub residual: f64,
    pub mu_consistency: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LeSpectrum {
    pub kappa: f64,
    pub bs_margin: f64,
    pub qhq_top: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LeQuotient {
    pub extrapolated: f64,
    pub hessian_prediction: f64,
    pub min_quotient: f64,
    pub zero_mode_fraction: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LeTheory {
    pub alpha_exp: f64,
    /// Minimal free energy; `-inf` when unbounded.
    pub f_m: f64,
    /// Critical mass, NaN away from `p = 1 + lambda/d`.
    pub m_c: f64,
    /// `int ell_chi^p`, NaN unless subcritical.
    pub p_m: f64,
    pub regime: LeRegime,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LeScattering {
    pub s: f64,
    pub tau: f64,
    pub f_at_0: f64,
    pub origin_margin: f64,
    pub residual: f64,
    pub max_monotonicity_violation: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LeFlowSummary {
    pub t_final: f64,
    pub final_energy: f64,
    pub max_energy_increase: f64,
    pub mass_drift: f64,
    pub final_p_integral: f64,
    pub accepted_steps: u64,
    pub rejected_steps: u64,
    /// 0 converged, 1 time reached, 2 budget exhausted, 3 unresolved concentration.
    pub stop: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &LabError) -> LeStatus {
    match e {
        LabError::Precondition(_) | LabError::SupportTouchesBoundary { .. } => LeStatus::Precondition,
        LabError::NonConvergence { .. } => LeStatus::NonConvergence,
        LabError::Numerical(_) => LeStatus::Numerical,
        LabError::Io(_) | LabError::Json(_) | LabError::Parse(_) => LeStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), LeStatus>) -> LeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LeStatus::Ok,
        Ok(Err(s)) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LeStatus::Panic
        }
    }
}

fn lab<T>(r: lane_emden_lab::Result<T>) -> Result<T, LeStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

fn null() -> LeStatus {
    set_error("null pointer argument".into());
    LeStatus::NullPointer
}

unsafe fn handle<'a>(h: *mut LeOptimizer) -> Result<&'a mut LeOptimizer, LeStatus> {
    h.as_mut().ok_or_else(null)
}

fn params(d: usize, lambda: f64, p: f64, chi: f64, mass: f64) -> Result<Params, LeStatus> {
    lab(Params::new(d, lambda, p).and_then(|q| q.with_chi(chi)).and_then(|q| q.with_mass(mass)))
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// call into this library on the same thread.
#[no_mangle]
pub extern "C" fn le_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn le_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Solve for the optimizer at `(d, lambda, p)` on `n` uniform cells.
/// `r_max <= 0` selects 1.5 times the support radius; `tol <= 0` the default.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn le_optimizer_solve(
    d: usize,
    lambda: f64,
    p: f64,
    n: usize,
    r_max: f64,
    tol: f64,
    out: *mut *mut LeOptimizer,
) -> LeStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(null)?;
        *out = std::ptr::null_mut();
        let params = params(d, lambda, p, 1.0, 1.0)?;
        let mut opts = SolveOptions::default();
        if tol > 0.0 {
            opts.tol = tol;
        }
        let r = if r_max > 0.0 { r_max } else { lab(auto_r_max(&params, 1.5, &opts))? };
        let grid = lab(make_grid(d, r, n, Grading::Uniform))?;
        let sol = lab(solve_optimizer(&params, &grid, &opts))?;
        *out = Box::into_raw(Box::new(LeOptimizer { sol, hessian: None }));
        Ok(())
    })
}

/// Release a handle; NULL is ignored.
///
/// # Safety
/// `h` must be NULL or a handle from [`le_optimizer_solve`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn le_optimizer_free(h: *mut LeOptimizer) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of grid nodes of the solution (0 for NULL).
///
/// # Safety
/// `h` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn le_optimizer_len(h: *const LeOptimizer) -> usize {
    h.as_ref().map_or(0, |h| h.sol.grid.len())
}

/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn le_optimizer_constants(h: *mut LeOptimizer, out: *mut LeConstants) -> LeStatus {
    guard(|| {
        let h = handle(h)?;
        let out = out.as_mut().ok_or_else(null)?;
        let sol = &h.sol;
        let c = derived_constants(&sol.params, sol.a);
        *out = LeConstants {
            a: sol.a,
            mu: sol.mu,
            p_c: c.p_c,
            s: c.s,
            alpha: c.alpha,
            tau: c.tau,
            threshold: c.threshold,
            support_edge: sol.support_edge(),
            residual: sol.residual,
            mu_consistency: sol.mu_consistency(),
        };
        Ok(())
    })
}

/// Copy nodes and optimizer values into caller buffers of length `len`,
/// which must equal [`le_optimizer_len`].
///
/// # Safety
/// `r` and `ell` must each point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn le_optimizer_profile(h: *mut LeOptimizer, r: *mut f64, ell: *mut f64, len: usize) -> LeStatus {
    guard(|| {
        let h = handle(h)?;
        if r.is_null() || ell.is_null() {
            return Err(null());
        }
        let n = h.sol.grid.len();
        if len != n {
            set_error(format!("buffer length {len} differs from grid length {n}"));
            return Err(LeStatus::Precondition);
        }
        std::slice::from_raw_parts_mut(r, n).copy_from_slice(&h.sol.grid.nodes);
        std::slice::from_raw_parts_mut(ell, n).copy_from_slice(&h.sol.ell.values);
        Ok(())
    })
}

fn hessian(h: &mut LeOptimizer) -> Result<&HessianContext, LeStatus> {
    if h.hessian.is_none() {
        h.hessian = Some(lab(HessianContext::new(&h.sol))?);
    }
    Ok(h.hessian.as_ref().unwrap())
}

/// Gap, Birman-Schwinger margin and projected Hessian top over channels `0..=m_max`.
///
/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn le_spectrum(h: *mut LeOptimizer, m_max: usize, out: *mut LeSpectrum) -> LeStatus {
    guard(|| {
        let h = handle(h)?;
        let out = out.as_mut().ok_or_else(null)?;
        let ctx = hessian(h)?;
        let (kappa, _) = lab(ctx.gap_estimate(m_max))?;
        *out = LeSpectrum { kappa, bs_margin: lab(ctx.bs_triviality_check())?, qhq_top: lab(ctx.qhq_top(m_max))? };
        Ok(())
    })
}

/// Deficit quotient curve along the seeded direction `seed` at the default amplitudes.
///
/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn le_stability_quotient(h: *mut LeOptimizer, seed: u64, out: *mut LeQuotient) -> LeStatus {
    guard(|| {
        let h = handle(h)?;
        let out = out.as_mut().ok_or_else(null)?;
        let ctx = hessian(h)?;
        let g = lab(random_direction(ctx, seed))?;
        let curve = lab(quotient_curve(ctx, &PerturbationSpec::new(g)))?;
        *out = LeQuotient {
            extrapolated: curve.extrapolated,
            hessian_prediction: curve.hessian_prediction,
            min_quotient: curve.rows.iter().map(|r| r.quotient).fold(f64::INFINITY, f64::min),
            zero_mode_fraction: curve.zero_mode_fraction,
        };
        Ok(())
    })
}

/// Scattering diagnostics; the fractional Hamiltonian uses `r_points` radii
/// up to 1.4 times the support radius and `t_slices` extension slices.
///
/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn le_scattering(h: *mut LeOptimizer, r_points: usize, t_slices: usize, out: *mut LeScattering) -> LeStatus {
    guard(|| {
        let h = handle(h)?;
        let out = out.as_mut().ok_or_else(null)?;
        let sol = &h.sol;
        let prob = lab(scattering_problem_from(sol))?;
        let scat = lab(solve_scattering(&prob, &sol.grid))?;
        let ham = if (prob.s - 1.0).abs() < 1e-12 {
            lab(local_hamiltonian(&scat))?
        } else {
            if r_points < 2 {
                set_error("r_points must be at least 2".into());
                return Err(LeStatus::Precondition);
            }
            let rl = sol.support_edge();
            let r: Vec<f64> = (0..r_points).map(|i| 1.4 * rl * i as f64 / (r_points - 1) as f64).collect();
            lab(fractional_hamiltonian(&scat, &r, &default_t_grid(rl, prob.s, t_slices)))?.0
        };
        *out = LeScattering {
            s: prob.s,
            tau: prob.tau,
            f_at_0: scat.f_at_0,
            origin_margin: scat.origin_margin(),
            residual: scat.residual,
            max_monotonicity_violation: monotonicity_report(&ham),
        };
        Ok(())
    })
}

/// Minimal free energy and regime for `a` at the given coupling and mass.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn le_theory_values(
    d: usize,
    lambda: f64,
    p: f64,
    chi: f64,
    mass: f64,
    a: f64,
    out: *mut LeTheory,
) -> LeStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(null)?;
        let tv = lab(theory_values(&params(d, lambda, p, chi, mass)?, a))?;
        *out = LeTheory {
            alpha_exp: tv.alpha_exp,
            f_m: tv.f_m,
            m_c: tv.m_c.unwrap_or(f64::NAN),
            p_m: tv.p_m.unwrap_or(f64::NAN),
            regime: match tv.regime {
                Regime::Subcritical => LeRegime::Subcritical,
                Regime::CriticalBounded => LeRegime::CriticalBounded,
                Regime::Unbounded => LeRegime::Unbounded,
            },
        };
        Ok(())
    })
}

/// Flow from a Gaussian of width `sigma` on `n` cells of radius `r_max`;
/// `t_end <= 0` runs to the energy plateau, `max_steps == 0` keeps the default budget.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn le_flow_run(
    d: usize,
    lambda: f64,
    p: f64,
    chi: f64,
    mass: f64,
    n: usize,
    r_max: f64,
    sigma: f64,
    t_end: f64,
    max_steps: u64,
    out: *mut LeFlowSummary,
) -> LeStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(null)?;
        let params = params(d, lambda, p, chi, mass)?;
        let grid = lab(make_grid(d, r_max, n, Grading::Uniform))?;
        let op = lab(FlowOperator::new(&params, &grid))?;
        let defaults = StopSpec::default();
        let stop = StopSpec {
            t_end: (t_end > 0.0).then_some(t_end),
            max_steps: if max_steps == 0 { defaults.max_steps } else { max_steps as usize },
            ..defaults
        };
        let init = lab(op.state(lab(gaussian(&grid, sigma, mass))?, stop.dt0))?;
        let trace = lab(op.run_flow(init, &stop))?;
        *out = LeFlowSummary {
            t_final: trace.final_state.t,
            final_energy: trace.final_state.energy,
            max_energy_increase: trace.max_energy_increase,
            mass_drift: trace.mass_drift,
            final_p_integral: trace.final_state.rho.power_integral(p),
            accepted_steps: trace.accepted_steps as u64,
            rejected_steps: trace.rejected_steps as u64,
            stop: match trace.stop {
                StopReason::Converged => 0,
                StopReason::TimeReached => 1,
                StopReason::BudgetExhausted => 2,
                StopReason::UnresolvedConcentration => 3,
            },
        };
        Ok(())
    })
}
