use lane_emden_lab::free_energy_flow::*;
use lane_emden_lab::numerics::brent_min;
use lane_emden_lab::optimizer::*;
use lane_emden_lab::radial_core::*;
use lane_emden_lab::riesz_kernel::pair_energy;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Minimum over dilations of `F(M ell_kappa)` with `int ell^p = 1`, `D(ell, ell) = a`.
/// Returns `None` when the minimizer sits at the edge of the search bracket.
fn dilation_oracle(d: f64, lambda: f64, p: f64, chi: f64, mass: f64, a: f64) -> Option<f64> {
    let f = |ln_k: f64| {
        let k = ln_k.exp();
        mass.powf(p) * k.powf(d * (p - 1.0)) / (p - 1.0) - 0.5 * chi * mass * mass * a * k.powf(lambda)
    };
    let (x, fx) = brent_min(f, -30.0, 30.0, 1e-13, 500);
    (x.abs() < 29.0).then_some(fx)
}

fn seeded_profile(grid: &std::sync::Arc<RadialGrid>, seed: u64) -> RadialProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: f64 = rng.random_range(0.3..0.7);
    let c: f64 = rng.random_range(0.0..1.0);
    let s: f64 = rng.random_range(0.5..2.0);
    RadialProfile::from_fn(grid.clone(), |r| s * (-(r / w).powi(2)).exp() * (1.0 + c * r * r))
}

#[test]
fn quadratic_minimum_has_closed_form() {
    let params = Params::new(3, 1.0, 2.0).unwrap();
    let a = 3.0 * PI.powf(-1.0 / 3.0);
    let tv = theory_values(&params, a).unwrap();
    assert_eq!(tv.regime, Regime::Subcritical);
    let expect = -2.0 * (a / 6.0).powf(1.5);
    assert!((tv.f_m - expect).abs() < 1e-14 * expect.abs());
    assert!((tv.f_m - 3.0 * (tv.alpha_exp - 1.0) * tv.p_m.unwrap()).abs() < 1e-14);
}

#[test]
fn critical_mass_separates_regimes() {
    let a = 2.183634;
    let below = Params::new(3, 1.0, 4.0 / 3.0).unwrap();
    let tv = theory_values(&below, a).unwrap();
    let m_c = tv.m_c.unwrap();
    assert!((m_c - (6.0 / a).powf(1.5)).abs() < 1e-12);
    assert_eq!(tv.regime, Regime::CriticalBounded);
    assert_eq!(tv.f_m, 0.0);
    let above = below.with_mass(1.5 * m_c).unwrap();
    let tv = theory_values(&above, a).unwrap();
    assert_eq!(tv.regime, Regime::Unbounded);
    assert_eq!(tv.f_m, f64::NEG_INFINITY);
    let sup = Params::new(3, 2.5, 1.7).unwrap();
    assert_eq!(theory_values(&sup, a).unwrap().regime, Regime::Unbounded);
    assert!(theory_values(&below, -1.0).is_err());
}

#[test]
fn g_alpha_values() {
    for alpha in [0.2, 0.5, 0.9] {
        assert!(g_alpha(1.0, alpha).abs() < 1e-15);
        assert!((g_alpha(0.0, alpha) - (1.0 / alpha - 1.0)).abs() < 1e-15);
    }
    assert!((fit_c_alpha(0.5) - 1.0).abs() < 1e-12);
    for alpha in [0.2, 0.7] {
        let c = fit_c_alpha(alpha);
        assert!(c > 0.0);
        for x in [0.0, 0.25, 0.9, 1.1, 3.0, 50.0] {
            assert!(g_alpha(x, alpha) >= c * (f64::sqrt(x) - 1.0).powi(2) - 1e-14);
        }
    }
}

#[test]
fn dilation_law_and_critical_scaling() {
    let grid = make_grid(3, 3.0, 200, Grading::Uniform).unwrap();
    let sub = Params::new(3, 1.0, 1.7).unwrap().with_chi(1.3).unwrap();
    let crit = Params::new(3, 1.0, 4.0 / 3.0).unwrap();
    for seed in 0..5u64 {
        let rho = seeded_profile(&grid, seed);
        let a = ChaCha8Rng::seed_from_u64(100 + seed).random_range(0.5..2.0);
        let scaled = dilate(&rho, a).unwrap();
        let p = sub.p;
        let expect = a.powf(-3.0 * (p - 1.0)) / (p - 1.0) * rho.power_integral(p)
            - a.powf(-1.0) * 0.5 * sub.chi * pair_energy(&rho, &rho, &sub).unwrap();
        let got = free_energy(&scaled, &sub).unwrap();
        assert!((got - expect).abs() <= 1e-8 * expect.abs(), "seed {seed}: {got} vs {expect}");
        let f0 = free_energy(&rho, &crit).unwrap();
        let f1 = free_energy(&scaled, &crit).unwrap();
        assert!((f1 - f0 / a).abs() <= 1e-8 * f0.abs(), "seed {seed}");
        assert!((scaled.integrate() - rho.integrate()).abs() <= 1e-12 * rho.integrate());
    }
}

#[test]
fn mass_normalization_transfers_energy() {
    let grid = make_grid(3, 3.0, 200, Grading::Uniform).unwrap();
    for seed in 0..5u64 {
        let rho = seeded_profile(&grid, seed);
        let (p, chi) = (1.6, 0.8);
        let m = rho.integrate();
        let (unit, chi_n) = mass_normalize(&rho, chi, m, p).unwrap();
        assert!((unit.integrate() - 1.0).abs() < 1e-8);
        assert!((chi_n - m.powf(2.0 - p) * chi).abs() < 1e-14);
        let big = Params::new(3, 1.0, p).unwrap().with_chi(chi).unwrap();
        let small = Params::new(3, 1.0, p).unwrap().with_chi(chi_n).unwrap();
        let lhs = free_energy(&rho, &big).unwrap();
        let rhs = m.powf(p) * free_energy(&unit, &small).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }
    assert!(mass_normalize(&seeded_profile(&grid, 0), 1.0, 0.0, 1.5).is_err());
}

#[test]
fn rescaled_optimizer_attains_theory() {
    let params = Params::new(3, 1.0, 2.0).unwrap();
    let grid = make_grid(3, 1.1, 400, Grading::Uniform).unwrap();
    let sol = solve_optimizer(&params, &grid, &SolveOptions::default()).unwrap();
    let tv = theory_values(&params, sol.a).unwrap();
    let target = make_grid(3, 4.0, 800, Grading::Uniform).unwrap();
    let lchi = scale_to_lchi_on(&sol.ell, tv.p_m.unwrap(), 2.0, &target).unwrap();
    assert!((lchi.integrate() - 1.0).abs() < 1e-12);
    assert!((lchi.power_integral(2.0) - tv.p_m.unwrap()).abs() / tv.p_m.unwrap() < 1e-3);
    let f = free_energy(&lchi, &params).unwrap();
    assert!((f - tv.f_m).abs() / tv.f_m.abs() < 1e-3, "{f} vs {}", tv.f_m);
    let gap = corollary_gap(&lchi, &sol, &params).unwrap();
    assert!(gap.degenerate);
    let crit = Params::new(3, 1.0, 4.0 / 3.0).unwrap();
    assert!(corollary_gap(&lchi, &sol, &crit).is_err());
}

#[test]
fn short_flow_is_dissipative_and_mass_preserving() {
    let params = Params::new(3, 1.0, 2.0).unwrap();
    let grid = make_grid(3, 3.0, 80, Grading::Uniform).unwrap();
    let op = FlowOperator::new(&params, &grid).unwrap();
    let init = op.state(gaussian(&grid, 0.5, 1.0).unwrap(), 1e-5).unwrap();
    let stop = StopSpec { t_end: Some(0.2), record_every: 10, ..StopSpec::default() };
    let trace = op.run_flow(init, &stop).unwrap();
    assert_eq!(trace.stop, StopReason::TimeReached);
    assert!((trace.final_state.t - 0.2).abs() < 1e-12);
    assert!(trace.mass_drift < 1e-12, "{:e}", trace.mass_drift);
    for w in trace.energies.windows(2) {
        assert!(w[1] <= w[0] + ENERGY_SLACK * w[0].abs());
    }
    assert!(trace.max_energy_increase <= ENERGY_SLACK);
    assert!(trace.final_state.rho.is_nonnegative());
    let csv = trace.to_csv();
    assert!(csv.starts_with("t,energy,mass,dt,accepted\n"));
    assert_eq!(csv.lines().count(), trace.rows.len() + 1);
}

#[test]
fn single_steps_accept_and_record_rejections() {
    let params = Params::new(3, 1.0, 1.8).unwrap();
    let grid = make_grid(3, 3.0, 60, Grading::Uniform).unwrap();
    let op = FlowOperator::new(&params, &grid).unwrap();
    let state = op.state(gaussian(&grid, 0.4, 1.0).unwrap(), 1.0).unwrap();
    let (next, rejections) = op.flow_step(&state).unwrap();
    assert!(rejections > 0);
    assert!(next.energy <= state.energy);
    assert!((next.rho.integrate() - 1.0).abs() < 1e-12);
}

#[test]
fn concentration_stop_is_labeled() {
    let params = Params::new(3, 1.0, 4.0 / 3.0).unwrap();
    let grid = make_grid(3, 2.0, 60, Grading::Uniform).unwrap();
    let op = FlowOperator::new(&params, &grid).unwrap();
    // Well above the critical mass (about 4.55 at this exponent).
    let init = op.state(gaussian(&grid, 0.3, 7.0).unwrap(), 1e-6).unwrap();
    let bound = 4.0 * init.rho.values[0];
    let trace = op.run_flow(init, &StopSpec { rho_bound: Some(bound), max_steps: 200_000, ..StopSpec::default() }).unwrap();
    assert_eq!(trace.stop, StopReason::UnresolvedConcentration);
    assert!(trace.energies.windows(2).all(|w| w[1] <= w[0] + ENERGY_SLACK * w[0].abs()));
    assert_eq!(StopReason::UnresolvedConcentration.label(), "unresolved concentration");
}

#[test]
fn flow_preconditions() {
    let grid = make_grid(3, 2.0, 40, Grading::Uniform).unwrap();
    assert!(FlowOperator::new(&Params::new(3, 1.0, 4.0 / 3.0).unwrap(), &grid).is_ok());
    assert!(FlowOperator::new(&Params::new(3, 1.0, 1.2).unwrap(), &grid).is_err());
    assert!(FlowOperator::new(&Params::new(3, 1.0, 2.5).unwrap(), &grid).is_err());
    let op = FlowOperator::new(&Params::new(3, 1.0, 1.5).unwrap(), &grid).unwrap();
    let other = make_grid(3, 2.5, 40, Grading::Uniform).unwrap();
    assert!(op.state(gaussian(&other, 0.5, 1.0).unwrap(), 1e-4).is_err());
    let init = op.state(gaussian(&grid, 0.5, 1.0).unwrap(), 1e-4).unwrap();
    assert!(op.run_flow(init, &StopSpec { window: 0, ..StopSpec::default() }).is_err());
    assert!(gaussian(&grid, 0.0, 1.0).is_err());
    assert!(dilate(&gaussian(&grid, 0.5, 1.0).unwrap(), -1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn theory_minimum_matches_dilation_oracle(
        lambda in 0.5f64..2.5,
        t in 0.05f64..0.95,
        chi in 0.3f64..3.0,
        mass in 0.3f64..3.0,
        a in 0.5f64..3.0,
    ) {
        let d = 3.0;
        let p_lo = (1.0 + lambda / d).max(2.0 / (2.0 - lambda / d));
        let p = p_lo + t * (2.0 - p_lo);
        prop_assume!(p < 2.0 - 1e-6 || p_lo < 2.0);
        let params = Params::new(3, lambda, p).unwrap().with_chi(chi).unwrap().with_mass(mass).unwrap();
        let tv = theory_values(&params, a).unwrap();
        let oracle = dilation_oracle(d, lambda, p, chi, mass, a);
        prop_assume!(oracle.is_some());
        let oracle = oracle.unwrap();
        prop_assert!((tv.f_m - oracle).abs() <= 1e-9 * oracle.abs(), "{} vs {}", tv.f_m, oracle);
    }

    #[test]
    fn abs_energy_window_detects_monotonicity(vals in proptest::collection::vec(0.01f64..1.0, 2..20)) {
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let energies: Vec<f64> = sorted.iter().map(|v| -v).collect();
        let grid = make_grid(3, 1.0, 16, Grading::Uniform).unwrap();
        let state = FlowState { rho: RadialProfile::zeros(grid), t: 0.0, energy: 0.0, dt: 0.0 };
        let trace = FlowTrace {
            rows: vec![],
            final_state: state,
            stop: StopReason::Converged,
            accepted_steps: 0,
            rejected_steps: 0,
            max_energy_increase: 0.0,
            mass_drift: 0.0,
            energies,
        };
        prop_assert!(trace.abs_energy_decreasing(sorted.len()));
    }
}
