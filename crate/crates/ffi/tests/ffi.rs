use lane_emden_ffi::*;
use std::ffi::CStr;
use std::path::Path;
use std::process::Command;
use std::ptr;

fn last_error() -> String {
    let p = le_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn solve(p: f64, r_max: f64, n: usize) -> *mut LeOptimizer {
    let mut h = ptr::null_mut();
    let st = unsafe { le_optimizer_solve(3, 1.0, p, n, r_max, 0.0, &mut h) };
    assert_eq!(st, LeStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn optimizer_round_trip() {
    let h = solve(1.5, 1.6, 200);
    let mut c = LeConstants::default();
    assert_eq!(unsafe { le_optimizer_constants(h, &mut c) }, LeStatus::Ok);
    assert!(le_last_error().is_null());
    assert!((c.mu - c.a * (1.0 - 1.5 / 3.0)).abs() < 1e-6 * c.a);
    assert!(c.residual <= 1e-6);
    let n = unsafe { le_optimizer_len(h) };
    assert_eq!(n, 200);
    let mut r = vec![0.0; n];
    let mut ell = vec![0.0; n];
    assert_eq!(unsafe { le_optimizer_profile(h, r.as_mut_ptr(), ell.as_mut_ptr(), n) }, LeStatus::Ok);
    assert!(r.windows(2).all(|w| w[1] > w[0]));
    assert!(ell.iter().all(|v| *v >= 0.0) && ell[0] > 0.0);
    assert_eq!(unsafe { le_optimizer_profile(h, r.as_mut_ptr(), ell.as_mut_ptr(), n - 1) }, LeStatus::Precondition);
    assert!(last_error().contains("buffer length"));
    unsafe { le_optimizer_free(h) };
}

#[test]
fn spectrum_stability_and_scattering() {
    let h = solve(4.0 / 3.0, 2.06, 200);
    let mut s = LeSpectrum::default();
    assert_eq!(unsafe { le_spectrum(h, 3, &mut s) }, LeStatus::Ok);
    assert!(s.kappa > 0.0 && s.bs_margin > 0.0);
    let mut q = LeQuotient::default();
    assert_eq!(unsafe { le_stability_quotient(h, 3, &mut q) }, LeStatus::Ok);
    assert!(q.min_quotient > 0.0);
    assert!((q.extrapolated - q.hessian_prediction).abs() < 0.05 * q.hessian_prediction);
    let mut sc = LeScattering::default();
    assert_eq!(unsafe { le_scattering(h, 0, 0, &mut sc) }, LeStatus::Ok);
    assert_eq!(sc.s, 1.0);
    assert!(sc.residual <= 1e-8 && sc.max_monotonicity_violation <= 1e-6);
    assert_eq!(unsafe { le_spectrum(h, 1, &mut s) }, LeStatus::Precondition);
    unsafe { le_optimizer_free(h) };
}

#[test]
fn error_codes_follow_the_failure() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { le_optimizer_solve(3, 1.0, 1.1, 100, 2.0, 0.0, &mut h) }, LeStatus::Precondition);
    assert!(h.is_null());
    assert!(last_error().contains("p_c"));
    assert_eq!(unsafe { le_optimizer_solve(3, 1.0, 2.0, 32, 1.1, 0.0, &mut h) }, LeStatus::NonConvergence);
    assert_eq!(unsafe { le_optimizer_solve(3, 1.0, 1.5, 100, 2.0, 0.0, ptr::null_mut()) }, LeStatus::NullPointer);
    let mut c = LeConstants::default();
    assert_eq!(unsafe { le_optimizer_constants(ptr::null_mut(), &mut c) }, LeStatus::NullPointer);
    assert_eq!(unsafe { le_optimizer_len(ptr::null()) }, 0);
    unsafe { le_optimizer_free(ptr::null_mut()) };
}

#[test]
fn theory_values_and_flow() {
    let mut t = LeTheory { alpha_exp: 0.0, f_m: 0.0, m_c: 0.0, p_m: 0.0, regime: LeRegime::Unbounded };
    let a = 3.0 * std::f64::consts::PI.powf(-1.0 / 3.0);
    assert_eq!(unsafe { le_theory_values(3, 1.0, 2.0, 1.0, 1.0, a, &mut t) }, LeStatus::Ok);
    assert_eq!(t.regime, LeRegime::Subcritical);
    assert!(t.m_c.is_nan());
    assert!((t.f_m + 2.0 * (a / 6.0).powf(1.5)).abs() < 1e-14);
    assert_eq!(unsafe { le_theory_values(3, 1.0, 4.0 / 3.0, 1.0, 1.0, 2.18, &mut t) }, LeStatus::Ok);
    assert_eq!(t.regime, LeRegime::CriticalBounded);
    assert!(t.p_m.is_nan() && t.m_c > 1.0);

    let mut f = LeFlowSummary::default();
    assert_eq!(unsafe { le_flow_run(3, 1.0, 2.0, 1.0, 1.0, 60, 3.0, 0.5, 0.1, 0, &mut f) }, LeStatus::Ok);
    assert_eq!(f.stop, 1);
    assert!((f.t_final - 0.1).abs() < 1e-12);
    assert!(f.mass_drift < 1e-12 && f.max_energy_increase <= 1e-10);
    assert_eq!(unsafe { le_flow_run(3, 1.0, 1.1, 1.0, 1.0, 60, 3.0, 0.5, 0.1, 0, &mut f) }, LeStatus::Precondition);
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(le_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lane_emden.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "le_optimizer_solve",
        "le_optimizer_free",
        "le_optimizer_profile",
        "le_spectrum",
        "le_stability_quotient",
        "le_scattering",
        "le_theory_values",
        "le_flow_run",
        "le_last_error",
        "typedef struct LeOptimizer LeOptimizer",
        "LE_STATUS_PANIC = 6",
    ] {
        assert!(text.contains(name), "{name}");
    }
    if let Ok(st) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).status() {
        assert!(st.success(), "header does not compile as C");
    }
}
