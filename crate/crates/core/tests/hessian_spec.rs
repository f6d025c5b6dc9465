use lane_emden_lab::hessian_spec::*;
use lane_emden_lab::optimizer::*;
use lane_emden_lab::radial_core::*;
use nalgebra::DMatrix;
use std::sync::OnceLock;

fn context(n: usize) -> &'static HessianContext {
    static COARSE: OnceLock<HessianContext> = OnceLock::new();
    static FINE: OnceLock<HessianContext> = OnceLock::new();
    let cell = if n == 200 { &COARSE } else { &FINE };
    cell.get_or_init(|| {
        let params = Params::new(3, 1.0, 4.0 / 3.0).unwrap();
        let grid = make_grid(3, 2.06, n, Grading::Uniform).unwrap();
        let sol = solve_optimizer(&params, &grid, &SolveOptions::default()).unwrap();
        HessianContext::new(&sol).unwrap()
    })
}

#[test]
fn dilation_identities_converge_under_refinement() {
    let coarse = context(200).verify_identities().unwrap();
    let fine = context(400).verify_identities().unwrap();
    for key in ["sw", "sw2", "sw3"] {
        assert!(fine[key] <= 1e-4, "{key}: {:e}", fine[key]);
        assert!(fine[key] <= 0.5 * coarse[key], "{key}: {:e} -> {:e}", coarse[key], fine[key]);
    }
}

#[test]
fn inner_product_and_determinant_match_closed_forms() {
    let ids = context(400).verify_identities().unwrap();
    assert!((ids["inner_product"] - 1.5 * (1.0 - 0.75)).abs() < 1e-5);
    assert!(ids["determinant"] < 0.0);
    assert!(ids["determinant_error"] < 1e-6, "{:e}", ids["determinant_error"]);
}

#[test]
fn translation_mode_is_top_of_channel_one() {
    let rep = context(400).channel_spectrum(1, 3).unwrap();
    assert!(rep.identity_residuals["eigenpair_error"] <= 1e-5);
    assert!(rep.identity_residuals["second_eigenvalue_gap"] > 0.1);
    let ctx = context(400);
    let v = ctx.translation_mode();
    let g: Vec<f64> = (0..v.len())
        .map(|i| if i < ctx.n_support { v[i] / ctx.sol.ell.values[i].powf(1.0 / 6.0) } else { 0.0 })
        .collect();
    let (form, removed) = ctx.hessian_form(1, &g).unwrap();
    assert_eq!(removed, 0.0);
    let norm: f64 = ctx.sol.grid.weights.iter().zip(&v).map(|(w, x)| w * x * x).sum();
    assert!(form.abs() < 1e-4 * ctx.threshold * norm, "{form:e} vs {:e}", ctx.threshold * norm);
}

#[test]
fn admissible_gap_is_positive_and_stable() {
    let (k1, tops) = context(200).gap_estimate(4).unwrap();
    let (k2, _) = context(400).gap_estimate(4).unwrap();
    assert!(k1 > 0.0 && k2 > 0.0);
    assert!((k1 - k2).abs() / k2 < 0.1);
    assert_eq!(tops.len(), 5);
    for m in 2..=4 {
        let rep = context(400).channel_spectrum(m, 4).unwrap();
        assert!(rep.eigenvalues.iter().all(|&v| v < rep.threshold), "m = {m}");
    }
}

#[test]
fn bare_channel_tops_decrease_with_m() {
    let ctx = context(200);
    let tops: Vec<f64> = (0..5).map(|m| ctx.channel_spectrum(m, 1).unwrap().eigenvalues[0]).collect();
    for w in tops.windows(2) {
        assert!(w[1] < w[0], "{tops:?}");
    }
}

#[test]
fn bs_margin_is_positive_and_not_shrinking() {
    let b1 = context(200).bs_triviality_check().unwrap();
    let b2 = context(400).bs_triviality_check().unwrap();
    assert!(b1 > 0.0);
    assert!(b2 >= b1 * (1.0 - 1e-6), "{b1} -> {b2}");
}

#[test]
fn projected_hessian_is_nonpositive() {
    let ctx = context(400);
    let top = ctx.qhq_top(4).unwrap();
    assert!(top <= 1e-6 * ctx.sol.a, "{top:e}");
}

#[test]
fn channel_matrices_are_symmetric() {
    let ctx = context(200);
    for m in 0..3 {
        let a = ctx.build_channel_a(m).unwrap();
        assert!((&a - a.transpose()).amax() <= 1e-12 * a.amax());
        assert_eq!(a.nrows(), ctx.n_support);
    }
}

#[test]
fn weight_is_support_indicator_power() {
    let ctx = context(200);
    for i in 0..ctx.sol.grid.len() {
        let l = ctx.sol.ell.values[i];
        let expect = if i < ctx.n_support { l.powf(1.0 / 3.0) } else { 0.0 };
        assert!((ctx.weight.values[i] - expect).abs() < 1e-14);
    }
}

#[test]
fn radial_derivative_is_exact_on_quartics() {
    let g = make_grid(3, 1.0, 40, Grading::Uniform).unwrap();
    let f: Vec<f64> = g.nodes.iter().map(|r| 1.0 - 2.0 * r * r + 0.5 * r.powi(4)).collect();
    let df = radial_derivative(&g.nodes, &f, 1.0);
    for (r, d) in g.nodes.iter().zip(&df) {
        assert!((d - (-4.0 * r + 2.0 * r.powi(3))).abs() < 1e-11, "r = {r}");
    }
    let odd: Vec<f64> = g.nodes.iter().map(|r| r - r.powi(3)).collect();
    let dodd = radial_derivative(&g.nodes, &odd, -1.0);
    for (r, d) in g.nodes.iter().zip(&dodd) {
        assert!((d - (1.0 - 3.0 * r * r)).abs() < 1e-11, "r = {r}");
    }
}

#[test]
fn eigen_utilities_sort_descending() {
    let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, -1.0]);
    let vals = symmetric_eigenvalues(a.clone()).unwrap();
    assert!((vals[0] - 3.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14 && (vals[2] + 1.0).abs() < 1e-14);
    let pairs = symmetric_eigenpairs(a.clone()).unwrap();
    for (v, x) in &pairs {
        assert!((&a * x - *v * x).norm() < 1e-13);
    }
}

#[test]
fn invalid_requests_are_rejected() {
    let ctx = context(200);
    assert!(ctx.gap_estimate(1).is_err());
    assert!(ctx.channel_spectrum(0, 0).is_err());
}
