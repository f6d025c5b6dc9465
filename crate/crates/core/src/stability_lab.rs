//! Deficit, distance to the optimizer manifold and the stability quotient
//! for radial densities near the optimizer.

use crate::error::{precondition, LabError, Result};
use crate::hessian_spec::HessianContext;
use crate::numerics::{brent_min, brent_root};
use crate::optimizer::OptimizerSolution;
use crate::radial_core::{RadialProfile, SmoothProfile};
use crate::riesz_kernel::pair_energy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeficitReport {
    pub epsilon: f64,
    pub deficit: f64,
    pub distance_sq: f64,
    pub kappa_star: f64,
    pub quotient: f64,
    /// Set when the quotient is a 0/0 at quadratic order.
    pub flag: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Renormalization {
    MassProjection,
}

/// Direction `g` and amplitudes; `rho_eps = [ell + eps g]_+` rescaled to unit mass.
#[derive(Clone, Debug)]
pub struct PerturbationSpec {
    pub direction: RadialProfile,
    pub epsilons: Vec<f64>,
    pub renormalization: Renormalization,
}

/// `{1e-1, 10^{-2.5}, 1e-2, 1e-3}`.
pub const DEFAULT_EPSILONS: [f64; 4] = [1e-1, 3.162_277_660_168_379_5e-3, 1e-2, 1e-3];

impl PerturbationSpec {
    pub fn new(direction: RadialProfile) -> Self {
        PerturbationSpec { direction, epsilons: DEFAULT_EPSILONS.to_vec(), renormalization: Renormalization::MassProjection }
    }

    pub fn perturb(&self, ell: &RadialProfile, eps: f64) -> Result<RadialProfile> {
        ell.check_same_grid(&self.direction)?;
        let raw = RadialProfile::new(
            ell.grid.clone(),
            ell.values.iter().zip(&self.direction.values).map(|(l, g)| (l + eps * g).max(0.0)).collect(),
        )?;
        let mass = raw.integrate();
        if !(mass > 0.0) {
            return precondition("perturbed density has no mass");
        }
        Ok(raw.scaled(1.0 / mass))
    }
}

fn check_density(rho: &RadialProfile) -> Result<()> {
    let m = rho.integrate();
    if (m - 1.0).abs() > 1e-8 {
        return precondition(format!("density must have unit mass, got {m}"));
    }
    if !rho.is_nonnegative() {
        return precondition("density must be nonnegative");
    }
    Ok(())
}

/// `int rho^p - (D(rho, rho) / a)^{d(p-1)/lambda}`.
pub fn deficit(rho: &RadialProfile, sol: &OptimizerSolution) -> Result<f64> {
    check_density(rho)?;
    rho.check_same_grid(&sol.ell)?;
    let p = sol.params;
    let beta = p.dim() * (p.p - 1.0) / p.lambda;
    let e = pair_energy(rho, rho, &p)?;
    Ok(rho.power_integral(p.p) - (e / sol.a).powf(beta))
}

/// `h(kappa) = int (rho^{p/2} - ell_kappa^{p/2})^2` with
/// `ell_kappa = kappa^d ell(kappa x)`. The self term is integrated on the grid
/// while the rescaled support stays resolved and inside `R_max`, and uses its
/// exact scaling `kappa^{d(p-1)} int ell^p` otherwise.
pub struct DistanceFunction {
    root: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    y: SmoothProfile,
    rho_p: f64,
    y_sq: f64,
    d: f64,
    p: f64,
    kappa_range: (f64, f64),
}

impl DistanceFunction {
    pub fn new(rho: &RadialProfile, sol: &OptimizerSolution) -> Result<Self> {
        rho.check_same_grid(&sol.ell)?;
        let p = sol.params.p;
        let y = sol.ell.map(|v| v.powf(0.5 * p));
        let grid = &rho.grid;
        let r_l = sol.support_radius.max(grid.nodes[1]);
        let n_in = grid.nodes.iter().filter(|&&r| r < r_l).count().max(1) as f64;
        Ok(DistanceFunction {
            root: rho.values.iter().map(|v| v.powf(0.5 * p)).collect(),
            nodes: grid.nodes.clone(),
            weights: grid.weights.clone(),
            y_sq: y.power_integral(2.0),
            y: SmoothProfile::new(&y),
            rho_p: rho.power_integral(p),
            d: sol.params.dim(),
            p,
            kappa_range: (r_l / (0.98 * grid.r_max), n_in / 64.0),
        })
    }

    fn scaled(&self, kappa: f64, r: f64) -> (f64, f64) {
        let e = 0.5 * self.d * self.p;
        let (v, dv) = self.y.eval_with_deriv(kappa * r);
        let s = kappa.powf(e);
        (s * v, e * kappa.powf(e - 1.0) * v + s * r * dv)
    }

    /// `h(kappa)` and `h'(kappa)`.
    pub fn eval(&self, kappa: f64) -> (f64, f64) {
        let quad = kappa >= self.kappa_range.0 && kappa <= self.kappa_range.1;
        let (mut cross, mut dcross, mut selfq, mut dselfq) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..self.nodes.len() {
            if self.root[i] == 0.0 && !quad {
                continue;
            }
            let (v, dv) = self.scaled(kappa, self.nodes[i]);
            let w = self.weights[i];
            cross += w * self.root[i] * v;
            dcross += w * self.root[i] * dv;
            selfq += w * v * v;
            dselfq += 2.0 * w * v * dv;
        }
        let (selfterm, dself) = if quad {
            (selfq, dselfq)
        } else {
            let k = self.d * (self.p - 1.0);
            (kappa.powf(k) * self.y_sq, k * kappa.powf(k - 1.0) * self.y_sq)
        };
        (self.rho_p - 2.0 * cross + selfterm, -2.0 * dcross + dself)
    }
    /// Limit of `h` as the translation parameter goes to infinity.
    pub fn translation_limit(&self, kappa: f64) -> f64 {
        self.rho_p + kappa.powf(self.d * (self.p - 1.0)) * self.y_sq
    }

    /// `int (rho^{p/2} - ell_kappa^{p/2}) (d/dkappa) ell_kappa^{p/2}`, normalized.
    pub fn stationarity(&self, kappa: f64) -> f64 {
        let (mut ip, mut nd, mut ng) = (0.0, 0.0, 0.0);
        for i in 0..self.nodes.len() {
            let (v, dv) = self.scaled(kappa, self.nodes[i]);
            let delta = self.root[i] - v;
            ip += self.weights[i] * delta * dv;
            nd += self.weights[i] * delta * delta;
            ng += self.weights[i] * dv * dv;
        }
        if nd == 0.0 {
            0.0
        } else {
            ip / (nd * ng).sqrt()
        }
    }
}

/// Minimizing scale `kappa*` and `min_kappa h(kappa)`.
pub fn manifold_distance(rho: &RadialProfile, sol: &OptimizerSolution) -> Result<(f64, f64)> {
    let h = DistanceFunction::new(rho, sol)?;
    let (lo, hi) = (1e-3_f64, 1e3_f64);
    let n = 121;
    let ks: Vec<f64> = (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect();
    let vals: Vec<f64> = ks.iter().map(|&k| h.eval(k).0).collect();
    let mut best = 0;
    for i in 1..n {
        if vals[i] < vals[best] {
            best = i;
        }
    }
    // Compare against kappa = 1 where the scan may straddle a sharp minimum.
    let (h1, _) = h.eval(1.0);
    if h1 <= vals[best] {
        best = ks.iter().position(|&k| k >= 1.0).unwrap();
    }
    if best == 0 || best == n - 1 {
        return Err(LabError::Numerical(format!("distance minimization hit the kappa bracket at {}", ks[best])));
    }
    let (a, b) = (ks[best - 1], ks[best + 1]);
    let (mut k, _) = brent_min(|k| h.eval(k).0, a, b, 1e-12, 200);
    let (ha, hb) = (h.eval(a).1, h.eval(b).1);
    if ha < 0.0 && hb > 0.0 {
        // Polish on the first-order condition.
        let kl = (k * (1.0 - 1e-6)).max(a);
        let kr = (k * (1.0 + 1e-6)).min(b);
        let (dl, dr) = (h.eval(kl).1, h.eval(kr).1);
        let (kl, kr) = if dl < 0.0 && dr > 0.0 { (kl, kr) } else { (a, b) };
        k = brent_root(|k| h.eval(k).1, kl, kr, 1e-15, 200)?;
    }
    Ok((k, h.eval(k).0.max(0.0)))
}

/// `delta = rho^{p/2} - ell^{p/2}`, `X = rho - ell - (2/p) ell^{1-p/2} delta`.
pub fn delta_x(rho: &RadialProfile, ell: &RadialProfile, p: f64) -> Result<(RadialProfile, RadialProfile)> {
    if !(p > 1.0 && p <= 2.0) {
        return precondition("delta_x requires 1 < p <= 2");
    }
    rho.check_same_grid(ell)?;
    let mut delta = Vec::with_capacity(rho.len());
    let mut x = Vec::with_capacity(rho.len());
    for (&r, &l) in rho.values.iter().zip(&ell.values) {
        let dl = r.powf(0.5 * p) - l.powf(0.5 * p);
        let om = if l > 0.0 { l.powf(1.0 - 0.5 * p) } else { 0.0 };
        let xv = r - l - 2.0 / p * om * dl;
        let bound = dl.abs().powf(2.0 / p);
        assert!(
            xv >= -1e-10 && xv <= bound + 1e-10,
            "pointwise bound 0 <= X <= |delta|^(2/p) violated: X = {xv}, bound = {bound}"
        );
        delta.push(dl);
        x.push(xv);
    }
    Ok((RadialProfile::new(rho.grid.clone(), delta)?, RadialProfile::new(rho.grid.clone(), x)?))
}

/// `F_p(x) = (x^2 - 1 + p - p x^{2/p}) / (1 - x)^2`, continuous at `x = 1`.
pub fn fp_function(x: f64, p: f64) -> f64 {
    let e = x - 1.0;
    if e.abs() < 1e-2 {
        // Taylor series of the numerator about x = 1 divided by e^2.
        let q = 2.0 / p;
        let mut sum = 0.5 * (2.0 - p * q * (q - 1.0));
        let mut coef = -p * q * (q - 1.0);
        let mut fact = 2.0;
        let mut pow = 1.0;
        for k in 3..=12 {
            coef *= q - (k - 1) as f64;
            fact *= k as f64;
            pow *= e;
            sum += coef / fact * pow;
        }
        sum
    } else {
        (x * x - 1.0 + p - p * x.powf(2.0 / p)) / (e * e)
    }
}

/// First-order perturbation of `ell^{p/2}` along `g` at unit mass.
fn delta_first_order(ctx: &HessianContext, g: &[f64]) -> Vec<f64> {
    let p = ctx.sol.params.p;
    let ell = &ctx.sol.ell.values;
    let mass: f64 = ctx.sol.grid.weights.iter().zip(g).map(|(w, v)| w * v).sum();
    (0..ell.len())
        .map(|i| if ell[i] > 0.0 { 0.5 * p * ell[i].powf(0.5 * p - 1.0) * (g[i] - mass * ell[i]) } else { 0.0 })
        .collect()
}

/// Second-order prediction of `deficit / distance^2` along `g`, together
/// with the fraction of the first-order perturbation lying on the dilation mode.
pub fn hessian_prediction(ctx: &HessianContext, g: &RadialProfile) -> Result<(f64, f64)> {
    let params = ctx.sol.params;
    let (p, a) = (params.p, ctx.sol.a);
    let beta = params.dim() * (p - 1.0) / params.lambda;
    let w = &ctx.sol.grid.weights;
    let dot = |f: &[f64], h: &[f64]| -> f64 { w.iter().zip(f.iter().zip(h)).map(|(w, (x, y))| w * x * y).sum() };
    let delta = delta_first_order(ctx, &g.values);
    let ad = ctx.apply_a(0, &delta)?;
    let dd = dot(&delta, &delta);
    let dy = dot(&delta, &ctx.y);
    let num = beta / (p * p * a) * (ctx.threshold * dd - dot(&delta, &ad) + ctx.alpha * dy * dy);
    let dpsi = dot(&delta, &ctx.psi);
    let pp = dot(&ctx.psi, &ctx.psi);
    let along = dpsi * dpsi / (pp * dd);
    Ok((num / (dd - dpsi * dpsi / pp), along))
}

/// Seeded smooth radial direction `g = ell s` with `sup |s| = 1` whose
/// first-order effect is orthogonal to the dilation mode.
pub fn random_direction(ctx: &HessianContext, seed: u64) -> Result<RadialProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = &ctx.sol.grid;
    let r_l = ctx.sol.support_edge().max(grid.nodes[ctx.n_support - 1]);
    let coeffs: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let poly = |c: &[f64], r: f64| -> f64 {
        let t = (r / r_l).powi(2);
        c.iter().rev().fold(0.0, |acc, &ck| acc * t + ck)
    };
    let ell = &ctx.sol.ell.values;
    let s_rand: Vec<f64> = grid.nodes.iter().map(|&r| poly(&coeffs, r)).collect();
    let s_aux: Vec<f64> = grid.nodes.iter().map(|&r| (r / r_l).powi(2)).collect();
    let g_of = |s: &[f64]| -> Vec<f64> { s.iter().zip(ell).map(|(a, b)| a * b).collect() };
    let w = &grid.weights;
    let proj = |s: &[f64]| -> f64 {
        let d = delta_first_order(ctx, &g_of(s));
        w.iter().zip(d.iter().zip(&ctx.psi)).map(|(w, (a, b))| w * a * b).sum()
    };
    let t = proj(&s_rand) / proj(&s_aux);
    let mut s: Vec<f64> = s_rand.iter().zip(&s_aux).map(|(a, b)| a - t * b).collect();
    let smax = (0..ctx.n_support).map(|i| s[i].abs()).fold(0.0, f64::max);
    if smax == 0.0 {
        return Err(LabError::Numerical("degenerate random direction".into()));
    }
    s.iter_mut().for_each(|v| *v /= smax);
    RadialProfile::new(grid.clone(), g_of(&s))
}

/// The dilation zero mode `d ell + r ell'`.
pub fn dilation_direction(ctx: &HessianContext) -> Result<RadialProfile> {
    let p = ctx.sol.params.p;
    let g: Vec<f64> = (0..ctx.y.len())
        .map(|i| {
            if ctx.y[i] > 0.0 {
                let l = ctx.sol.ell.values[i];
                let dl = 2.0 / p * ctx.y[i].powf(2.0 / p - 1.0) * ctx.dy[i];
                ctx.sol.params.dim() * l + ctx.sol.grid.nodes[i] * dl
            } else {
                0.0
            }
        })
        .collect();
    RadialProfile::new(ctx.sol.grid.clone(), g)
}

/// Result of a quotient scan along one direction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuotientCurve {
    pub rows: Vec<DeficitReport>,
    /// Richardson extrapolation on the two smallest amplitudes.
    pub extrapolated: f64,
    pub hessian_prediction: f64,
    pub zero_mode_fraction: f64,
}

/// Fraction of the first-order perturbation on the dilation mode above which
/// the quadratic quotient is reported as a zero-mode 0/0.
pub const ZERO_MODE_FRACTION: f64 = 1.0 - 1e-6;

pub fn quotient_curve(ctx: &HessianContext, spec: &PerturbationSpec) -> Result<QuotientCurve> {
    if spec.epsilons.len() < 2 || spec.epsilons.iter().any(|e| !(*e > 0.0)) {
        return precondition("at least two positive amplitudes are required");
    }
    let (pred, along) = hessian_prediction(ctx, &spec.direction)?;
    let zero_mode = along > ZERO_MODE_FRACTION;
    let mut rows = Vec::with_capacity(spec.epsilons.len());
    for &eps in &spec.epsilons {
        let rho = spec.perturb(&ctx.sol.ell, eps)?;
        let def = deficit(&rho, &ctx.sol)?;
        let (kappa_star, distance_sq) = manifold_distance(&rho, &ctx.sol)?;
        let flag = if zero_mode {
            Some("zero_mode".to_string())
        } else if distance_sq < 1e-12 {
            Some("degenerate_distance".to_string())
        } else {
            None
        };
        let quotient = if distance_sq > 0.0 { def / distance_sq } else { f64::NAN };
        rows.push(DeficitReport { epsilon: eps, deficit: def, distance_sq, kappa_star, quotient, flag });
    }
    let mut sorted: Vec<&DeficitReport> = rows.iter().collect();
    sorted.sort_by(|a, b| a.epsilon.partial_cmp(&b.epsilon).unwrap());
    let (s, l) = (sorted[0], sorted[1]);
    let ratio = l.epsilon / s.epsilon;
    let extrapolated = (ratio * s.quotient - l.quotient) / (ratio - 1.0);
    Ok(QuotientCurve { rows, extrapolated, hessian_prediction: pred, zero_mode_fraction: along })
}

pub fn reports_to_csv(rows: &[DeficitReport]) -> String {
    let mut out = String::from("epsilon,deficit,distance_sq,kappa_star,quotient,flag\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.epsilon,
            r.deficit,
            r.distance_sq,
            r.kappa_star,
            r.quotient,
            r.flag.as_deref().unwrap_or("")
        );
    }
    out
}
