use lane_emden_lab::radial_core::*;
use proptest::prelude::*;
use std::f64::consts::PI;

#[test]
fn gaussian_integral_matches_pi_power() {
    for (d, tol) in [(1usize, 1e-12), (3, 1e-12), (5, 1e-12), (2, 1e-4)] {
        let g = make_grid(d, 9.0, 600, Grading::Uniform).unwrap();
        let rho = RadialProfile::from_fn(g, |r| (-r * r).exp());
        let exact = PI.powf(d as f64 / 2.0);
        assert!((rho.integrate() - exact).abs() / exact < tol, "d = {d}: {} vs {exact}", rho.integrate());
    }
}

#[test]
fn weights_sum_to_ball_volume() {
    for d in 1..=5 {
        for grading in [Grading::Uniform, Grading::Geometric] {
            let g = make_grid(d, 1.7, 64, grading).unwrap();
            let total: f64 = g.weights.iter().sum();
            let vol = PI.powf(d as f64 / 2.0) / statrs::function::gamma::gamma(d as f64 / 2.0 + 1.0) * 1.7f64.powi(d as i32);
            assert!((total - vol).abs() / vol < 1e-13, "d = {d} {grading:?}");
            assert!(g.weights.iter().all(|w| *w > 0.0));
        }
    }
}

#[test]
fn geometric_grid_is_graded_towards_origin() {
    let g = make_grid(3, 2.0, 100, Grading::Geometric).unwrap();
    let h0 = g.edges[1] - g.edges[0];
    let hn = g.edges[100] - g.edges[99];
    assert!(hn > 10.0 * h0);
    assert_eq!(*g.edges.last().unwrap(), 2.0);
}

#[test]
fn lp_norm_of_indicator() {
    let g = make_grid(3, 2.0, 400, Grading::Uniform).unwrap();
    let rho = RadialProfile::from_fn(g, |r| if r < 1.0 { 1.0 } else { 0.0 });
    let h = 2.0 / 400.0;
    let vol = 4.0 * PI / 3.0 * (1.0 - h * h / 4.0);
    for q in [1.0, 1.5, 2.0, 4.0] {
        let n = rho.lp_norm(q).unwrap();
        assert!((n - vol.powf(1.0 / q)).abs() < 1e-12, "q = {q}");
    }
    assert!(rho.lp_norm(0.5).is_err());
}

#[test]
fn profile_rejects_length_mismatch_and_grid_mismatch() {
    let g = make_grid(3, 1.0, 32, Grading::Uniform).unwrap();
    assert!(RadialProfile::new(g.clone(), vec![0.0; 31]).is_err());
    let h = make_grid(3, 1.5, 32, Grading::Uniform).unwrap();
    let a = RadialProfile::zeros(g);
    let b = RadialProfile::zeros(h);
    assert!(a.check_same_grid(&b).is_err());
}

#[test]
fn rescale_rejects_nonpositive_kappa() {
    let g = make_grid(3, 1.0, 32, Grading::Uniform).unwrap();
    let rho = RadialProfile::zeros(g);
    assert!(rescale(&rho, 0.0).is_err());
    assert!(rescale(&rho, f64::NAN).is_err());
    assert!(rescale_smooth(&rho, -1.0).is_err());
}

#[test]
fn smooth_profile_reproduces_nodes() {
    let g = make_grid(3, 2.0, 64, Grading::Uniform).unwrap();
    let rho = RadialProfile::from_fn(g.clone(), |r| (1.0 - r * r / 4.0).max(0.0).powi(2));
    let sp = SmoothProfile::new(&rho);
    for (r, v) in g.nodes.iter().zip(&rho.values) {
        assert!((sp.eval(*r) - v).abs() < 1e-14);
    }
    assert_eq!(sp.eval(2.5), 0.0);
}

#[test]
fn stability_window_messages_name_the_violated_condition() {
    let e = Params::new(3, 1.0, 1.1).unwrap().check_stability_window().unwrap_err().to_string();
    assert!(e.contains("p_c"), "{e}");
    let e = Params::new(3, 0.5, 1.5).unwrap().check_stability_window().unwrap_err().to_string();
    assert!(e.contains("d - 2"), "{e}");
    let e = Params::new(3, 1.0, 2.5).unwrap().check_stability_window().unwrap_err().to_string();
    assert!(e.contains("2"), "{e}");
}

fn bump(r: f64, w: f64, c: f64) -> f64 {
    (-(r / w).powi(2)).exp() * (1.0 + c * r * r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn smooth_rescale_preserves_mass(kappa in 0.6f64..1.8, w in 0.3f64..0.6, c in 0.0f64..1.0) {
        let g = make_grid(3, 6.0, 800, Grading::Uniform).unwrap();
        let rho = RadialProfile::from_fn(g, |r| bump(r, w, c));
        let m0 = rho.integrate();
        let m1 = rescale_smooth(&rho, kappa).unwrap().integrate();
        prop_assert!((m1 - m0).abs() / m0 < 1e-4);
    }

    #[test]
    fn lp_norm_scales_under_dilation(kappa in 0.6f64..1.8, q in 1.0f64..3.0, w in 0.3f64..0.6) {
        let d = 3.0;
        let g = make_grid(3, 6.0, 800, Grading::Uniform).unwrap();
        let rho = RadialProfile::from_fn(g, |r| bump(r, w, 0.5));
        let scaled = rescale_smooth(&rho, kappa).unwrap();
        let expect = kappa.powf(d * (1.0 - 1.0 / q)) * rho.lp_norm(q).unwrap();
        let got = scaled.lp_norm(q).unwrap();
        prop_assert!((got - expect).abs() / expect < 1e-4);
    }

    #[test]
    fn integration_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g = make_grid(2, 3.0, 50, Grading::Geometric).unwrap();
        let f = RadialProfile::from_fn(g.clone(), |r| r.cos());
        let h = RadialProfile::from_fn(g.clone(), |r| 1.0 / (1.0 + r));
        let comb = RadialProfile::new(g, f.values.iter().zip(&h.values).map(|(x, y)| a * x + b * y).collect()).unwrap();
        let lhs = comb.integrate();
        let rhs = a * f.integrate() + b * h.integrate();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn csv_round_trip_is_exact(vals in proptest::collection::vec(-1e6f64..1e6, 16)) {
        let g = make_grid(3, 1.0, 16, Grading::Uniform).unwrap();
        let rho = RadialProfile::new(g.clone(), vals).unwrap();
        let back = RadialProfile::from_csv(g, &rho.to_csv()).unwrap();
        prop_assert_eq!(back.values, rho.values);
    }
}
