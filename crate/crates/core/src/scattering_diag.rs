//! Zero-energy scattering equation `(-Delta)^s f + V f = tau V` in Riesz
//! integral form, the local Hamiltonian (`s = 1`) and the extension-based
//! fractional Hamiltonian with their monotonicity diagnostics.

use crate::error::{precondition, LabError, Result};
use crate::numerics::gl;
use crate::optimizer::{derived_constants, OptimizerSolution};
use crate::radial_core::{sphere_area, Params, RadialGrid, RadialProfile, SmoothProfile};
use crate::riesz_kernel::{channel_kernel, kernel_table, riesz_constants};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct ScatteringProblem {
    pub params: Params,
    pub s: f64,
    pub c_d: f64,
    pub v: RadialProfile,
    pub tau: f64,
    /// Outer radius of `supp V`.
    pub support_radius: f64,
    /// `V` failed the monotonicity check and was accepted for exploration only.
    pub nonmonotone: bool,
}

fn support_of(v: &RadialProfile) -> f64 {
    match v.values.iter().rposition(|&x| x != 0.0) {
        Some(i) => v.grid.edges[i + 1],
        None => 0.0,
    }
}

fn is_nondecreasing(v: &[f64]) -> bool {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    v.windows(2).all(|w| w[1] >= w[0] - 1e-13 * scale)
}

/// Problem with explicit potential; `allow_nonmonotone` admits `V` that is not
/// nondecreasing (flagged, nothing asserted).
pub fn scattering_problem(params: &Params, v: RadialProfile, tau: f64, allow_nonmonotone: bool) -> Result<ScatteringProblem> {
    params.validate()?;
    if params.lambda < params.dim() - 2.0 {
        return precondition(format!("s = (d - lambda)/2 must not exceed 1 (lambda = {} < d - 2)", params.lambda));
    }
    if v.grid.d != params.d {
        return precondition("potential grid dimension differs from d");
    }
    if v.values.iter().any(|x| !x.is_finite()) {
        return precondition("potential must be bounded");
    }
    let monotone = is_nondecreasing(&v.values);
    if !monotone && !allow_nonmonotone {
        return precondition("potential must be nondecreasing in r");
    }
    let rc = riesz_constants(params)?;
    let support_radius = support_of(&v);
    Ok(ScatteringProblem { params: *params, s: rc.s, c_d: rc.c_d, v, tau, support_radius, nonmonotone: !monotone })
}

/// `V = -(d c_d / (2 p lambda a)) 4 ell^{2-p}`, `tau = mu (1 - lambda/d)`.
pub fn scattering_problem_from(sol: &OptimizerSolution) -> Result<ScatteringProblem> {
    scattering_problem_from_with(sol, false)
}

pub fn scattering_problem_from_with(sol: &OptimizerSolution, allow_nonmonotone: bool) -> Result<ScatteringProblem> {
    let params = sol.params;
    params.validate()?;
    if params.lambda < params.dim() - 2.0 {
        return precondition(format!("s = (d - lambda)/2 must not exceed 1 (lambda = {} < d - 2)", params.lambda));
    }
    let rc = riesz_constants(&params)?;
    let (d, l, p) = (params.dim(), params.lambda, params.p);
    let pref = d * rc.c_d / (2.0 * p * l * sol.a);
    let v = sol.ell.map(|x| if x > 0.0 { -pref * 4.0 * x.powf(2.0 - p) } else { 0.0 });
    let tau = derived_constants(&params, sol.a).tau;
    scattering_problem(&params, v, tau, allow_nonmonotone)
}

/// Radial function known on a grid plus a far-field closure beyond `R_max`.
#[derive(Clone, Debug)]
pub struct RadialField {
    nodes: Vec<f64>,
    values: Vec<f64>,
    r_max: f64,
    far: FarField,
}

#[derive(Clone, Debug)]
pub enum FarField {
    Constant(f64),
    /// `w^lambda f(w)` tabulated on a logarithmic grid, constant beyond it.
    Table { lambda: f64, log_w: Vec<f64>, scaled: Vec<f64> },
}

impl RadialField {
    pub fn new(profile: &RadialProfile, far: FarField) -> Self {
        RadialField { nodes: profile.grid.nodes.clone(), values: profile.values.clone(), r_max: profile.grid.r_max, far }
    }

    /// Profile extended by its value at the last node.
    pub fn with_constant_tail(profile: &RadialProfile) -> Self {
        let c = *profile.values.last().unwrap();
        Self::new(profile, FarField::Constant(c))
    }

    fn node(&self, v: i64) -> (f64, f64) {
        if v >= 0 {
            (self.nodes[v as usize], self.values[v as usize])
        } else {
            let k = (-v - 1) as usize;
            (-self.nodes[k], self.values[k])
        }
    }

    pub fn eval(&self, w: f64) -> f64 {
        let w = w.abs();
        if w > self.r_max {
            return self.far_eval(w);
        }
        let n = self.nodes.len() as i64;
        let k = self.nodes.partition_point(|&x| x <= w) as i64 - 1;
        let start = (k - 1).clamp(-2, n - 4);
        let pts: Vec<(f64, f64)> = (start..start + 4).map(|v| self.node(v)).collect();
        let mut out = 0.0;
        for j in 0..4 {
            let mut l = 1.0;
            for m in 0..4 {
                if m != j {
                    l *= (w - pts[m].0) / (pts[j].0 - pts[m].0);
                }
            }
            out += l * pts[j].1;
        }
        out
    }

    fn far_eval(&self, w: f64) -> f64 {
        match &self.far {
            FarField::Constant(c) => *c,
            FarField::Table { lambda, log_w, scaled } => {
                let lw = w.ln();
                let n = log_w.len();
                let s = if lw <= log_w[0] {
                    scaled[0]
                } else if lw >= log_w[n - 1] {
                    scaled[n - 1]
                } else {
                    let k = log_w.partition_point(|&x| x <= lw) - 1;
                    let t = (lw - log_w[k]) / (log_w[k + 1] - log_w[k]);
                    scaled[k] + t * (scaled[k + 1] - scaled[k])
                };
                s * w.powf(-lambda)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScatteringSolution {
    pub problem: ScatteringProblem,
    pub f: RadialProfile,
    pub f_at_0: f64,
    /// Relative weighted-L2 residual of the integral equation.
    pub residual: f64,
    /// `int V (tau - f)`, the far-field monopole source.
    pub source_mass: f64,
    pub field: RadialField,
}

impl ScatteringSolution {
    /// `|f(0) - tau| / |tau|`.
    pub fn origin_margin(&self) -> f64 {
        (self.f_at_0 - self.problem.tau).abs() / self.problem.tau.abs().max(f64::MIN_POSITIVE)
    }
}

/// Solve `(I + K_0 W V / c_d) f = tau K_0 W V / c_d 1` on `grid`
/// (`V` is resampled when it lives on a different grid).
pub fn solve_scattering(prob: &ScatteringProblem, grid: &Arc<RadialGrid>) -> Result<ScatteringSolution> {
    let v = if prob.v.grid.same_as(grid) {
        prob.v.clone()
    } else {
        let sp = SmoothProfile::new(&prob.v);
        RadialProfile::from_fn(grid.clone(), |r| if r <= prob.support_radius { sp.eval(r) } else { 0.0 })
    };
    let k = channel_kernel(&prob.params, grid, 0)?;
    let n = grid.len();
    let w = &grid.weights;
    let c = 1.0 / prob.c_d;
    let mut a = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        let s = c * w[j] * v.values[j];
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            a[(i, j)] += k.matrix[(i, j)] * s;
        }
    }
    let rhs = DVector::from_iterator(n, (0..n).map(|i| prob.tau * c * (0..n).map(|j| k.matrix[(i, j)] * w[j] * v.values[j]).sum::<f64>()));
    let lu = a.clone().lu();
    let sol = lu.solve(&rhs).ok_or_else(|| {
        LabError::Numerical("scattering system is singular (Birman-Schwinger eigenvalue at the threshold)".into())
    })?;
    let f: Vec<f64> = sol.iter().copied().collect();
    if f.iter().any(|x| !x.is_finite()) {
        return Err(LabError::Numerical("scattering system is numerically singular".into()));
    }
    let g: Vec<f64> = (0..n).map(|j| v.values[j] * (prob.tau - f[j])).collect();
    let rep = k.apply(&g);
    let res: Vec<f64> = (0..n).map(|i| f[i] - c * rep[i]).collect();
    let norm = |x: &[f64]| x.iter().zip(w).map(|(a, b)| a * a * b).sum::<f64>().sqrt();
    let fnorm = norm(&f);
    let residual = if fnorm > 0.0 { norm(&res) / fnorm } else { norm(&res) };
    let f_at_0 = c * k.at_origin(&g);
    let source_mass: f64 = g.iter().zip(w).map(|(a, b)| a * b).sum();
    let profile = RadialProfile::new(grid.clone(), f)?;
    let far = far_table(prob, grid, &g)?;
    let field = RadialField::new(&profile, far);
    Ok(ScatteringSolution { problem: prob.clone(), f: profile, f_at_0, residual, source_mass, field })
}

fn far_table(prob: &ScatteringProblem, grid: &Arc<RadialGrid>, g: &[f64]) -> Result<FarField> {
    let table = kernel_table(prob.params.d, prob.params.lambda, 0)?;
    let lambda = prob.params.lambda;
    let lo = grid.r_max.ln();
    let hi = (grid.r_max * 1e20).ln();
    let m = 801;
    let log_w: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
    let c = 1.0 / prob.c_d;
    let scaled = log_w
        .iter()
        .map(|&lw| {
            let wv = lw.exp();
            let sum: f64 = (0..g.len())
                .filter(|&j| g[j] != 0.0)
                .map(|j| grid.weights[j] * g[j] * table.kernel(wv, grid.nodes[j]))
                .sum();
            c * sum * wv.powf(lambda)
        })
        .collect();
    Ok(FarField::Table { lambda, log_w, scaled })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HamiltonianKind {
    Local,
    Fractional,
}

#[derive(Clone, Debug)]
pub struct HamiltonianProfile {
    pub kind: HamiltonianKind,
    pub r: Vec<f64>,
    pub h: Vec<f64>,
    /// Expected magnitude of `H` at the last radius from the far-field decay.
    pub tail_estimate: f64,
}

impl HamiltonianProfile {
    pub fn h_end(&self) -> f64 {
        *self.h.last().unwrap()
    }

    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("r,value\n");
        for (r, h) in self.r.iter().zip(&self.h) {
            let _ = writeln!(out, "{r:.16e},{h:.16e}");
        }
        out
    }
}

/// `max_i (H(r_{i+1}) - H(r_i))_+ / (|H(r_0)| + tiny)`.
pub fn monotonicity_report(h: &HamiltonianProfile) -> f64 {
    let scale = h.h[0].abs() + f64::MIN_POSITIVE;
    h.h.windows(2).map(|w| (w[1] - w[0]).max(0.0)).fold(0.0, f64::max) / scale
}

fn lagrange_weights(xs: &[f64; 4], x: f64) -> [f64; 4] {
    let mut out = [1.0; 4];
    for j in 0..4 {
        for m in 0..4 {
            if m != j {
                out[j] *= (x - xs[m]) / (xs[j] - xs[m]);
            }
        }
    }
    out
}

/// `int_0^{r_i} q(r) dr` at every node for node values `q` of parity `parity`,
/// integrating the local cubic interpolant exactly.
pub fn cumulative_integral(nodes: &[f64], q: &[f64], parity: f64) -> Vec<f64> {
    let n = nodes.len() as i64;
    let pos = |v: i64| if v >= 0 { nodes[v as usize] } else { -nodes[(-v - 1) as usize] };
    let val = |v: i64| if v >= 0 { q[v as usize] } else { parity * q[(-v - 1) as usize] };
    let (x, w) = gl(4);
    let seg = |a: f64, b: f64, start: i64| -> f64 {
        let xs = [pos(start), pos(start + 1), pos(start + 2), pos(start + 3)];
        let vs = [val(start), val(start + 1), val(start + 2), val(start + 3)];
        let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
        x.iter()
            .zip(w.iter())
            .map(|(xi, wi)| {
                let l = lagrange_weights(&xs, c + h * xi);
                wi * h * (0..4).map(|j| l[j] * vs[j]).sum::<f64>()
            })
            .sum()
    };
    let mut out = Vec::with_capacity(nodes.len());
    let mut acc = seg(0.0, nodes[0], -2);
    out.push(acc);
    for i in 1..n {
        let start = (i - 2).clamp(-2, n - 4);
        acc += seg(nodes[(i - 1) as usize], nodes[i as usize], start);
        out.push(acc);
    }
    out
}

/// `H = f'^2/2 - V (tau - f)^2 / 2` at the grid nodes (`s = 1`), with
/// `f'(r) = -r^{1-d} int_0^r V (tau - f) s^{d-1} ds`.
pub fn local_hamiltonian(sol: &ScatteringSolution) -> Result<HamiltonianProfile> {
    let prob = &sol.problem;
    if (prob.s - 1.0).abs() > 1e-12 {
        return precondition("the local Hamiltonian requires s = 1");
    }
    let grid = &sol.f.grid;
    let d = grid.d as i32;
    let v = resample_v(prob, grid);
    let g: Vec<f64> = (0..grid.len()).map(|i| v[i] * (prob.tau - sol.f.values[i])).collect();
    let q: Vec<f64> = grid.nodes.iter().zip(&g).map(|(r, gi)| gi * r.powi(d - 1)).collect();
    let parity = if (d - 1) % 2 == 0 { 1.0 } else { -1.0 };
    let cum = cumulative_integral(&grid.nodes, &q, parity);
    let h: Vec<f64> = (0..grid.len())
        .map(|i| {
            let r = grid.nodes[i];
            let fp = -cum[i] / r.powi(d - 1);
            0.5 * fp * fp - 0.5 * v[i] * (prob.tau - sol.f.values[i]).powi(2)
        })
        .collect();
    let r_end = *grid.nodes.last().unwrap();
    // Beyond supp V, f' = -Q / (|S| r^{d-1}) exactly.
    let fp_far = sol.source_mass / (sphere_area(grid.d) * r_end.powi(d - 1));
    Ok(HamiltonianProfile { kind: HamiltonianKind::Local, r: grid.nodes.clone(), h, tail_estimate: 0.5 * fp_far * fp_far })
}

fn resample_v(prob: &ScatteringProblem, grid: &Arc<RadialGrid>) -> Vec<f64> {
    if prob.v.grid.same_as(grid) {
        prob.v.values.clone()
    } else {
        let sp = SmoothProfile::new(&prob.v);
        grid.nodes.iter().map(|&r| if r <= prob.support_radius { sp.eval(r) } else { 0.0 }).collect()
    }
}

/// `d_s = 2^{2s-1} Gamma(s) / Gamma(1-s)`.
pub fn d_s(s: f64) -> f64 {
    2f64.powf(2.0 * s - 1.0) * gamma(s) / gamma(1.0 - s)
}

/// `c_{d,s}` normalizing `P_s(x, t) = c t^{2s} / (t^2 + |x|^2)^{d/2+s}`.
pub fn poisson_constant(d: usize, s: f64) -> f64 {
    let n = d as f64;
    gamma(n / 2.0 + s) / (std::f64::consts::PI.powf(n / 2.0) * gamma(s))
}

/// `Gamma(s) Gamma(1-s) sin(pi s) / pi - 1`.
pub fn reflection_defect(s: f64) -> f64 {
    gamma(s) * gamma(1.0 - s) * (std::f64::consts::PI * s).sin() / std::f64::consts::PI - 1.0
}

/// Quadrature in the distance `rho' = |z|` shared by all slices.
struct RhoGrid {
    x: Vec<f64>,
    /// `|S^{d-1}| rho'^{d-1}` times the quadrature weight.
    w: Vec<f64>,
    hi: f64,
}

impl RhoGrid {
    fn new(d: usize, lo: f64, hi: f64) -> Self {
        let (gx, gw) = gl(8);
        let area = sphere_area(d);
        let panels = ((hi / lo).log2().ceil()) as usize;
        let mut x = Vec::with_capacity(panels * 8);
        let mut w = Vec::with_capacity(panels * 8);
        // Inner ball [0, lo] as one panel, then factor-two panels.
        let mut edges = vec![0.0, lo];
        for k in 1..=panels {
            edges.push(lo * 2f64.powi(k as i32));
        }
        for e in edges.windows(2) {
            let (c, h) = (0.5 * (e[0] + e[1]), 0.5 * (e[1] - e[0]));
            for (xi, wi) in gx.iter().zip(gw.iter()) {
                let r = c + h * xi;
                x.push(r);
                w.push(wi * h * area * r.powi(d as i32 - 1));
            }
        }
        RhoGrid { x, w, hi: *edges.last().unwrap() }
    }
}

/// Spherical mean of `f` over the sphere of radius `rho` about a point at
/// distance `r` from the origin, and the mean of `f cos(theta)`.
struct SphericalMeans<'a> {
    field: &'a RadialField,
    d: usize,
    /// Cumulative integrals of `f w` and `f w^3` on a fine panel grid (d = 3).
    cum: Option<Cumulative>,
    theta: (Vec<f64>, Vec<f64>),
}

struct Cumulative {
    edges: Vec<f64>,
    f1: Vec<f64>,
    f3: Vec<f64>,
}

impl Cumulative {
    fn build(field: &RadialField, w_max: f64) -> Self {
        let mut edges = vec![0.0];
        edges.extend(field.nodes.iter().copied());
        edges.push(field.r_max);
        let mut e = field.r_max;
        while e < w_max {
            e *= 1.02;
            edges.push(e);
        }
        let (gx, gw) = gl(6);
        let mut f1 = vec![0.0];
        let mut f3 = vec![0.0];
        for k in 0..edges.len() - 1 {
            let (a, b) = (edges[k], edges[k + 1]);
            let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
            let (mut s1, mut s3) = (0.0, 0.0);
            for (xi, wi) in gx.iter().zip(gw.iter()) {
                let w = c + h * xi;
                let fv = field.eval(w);
                s1 += wi * h * fv * w;
                s3 += wi * h * fv * w * w * w;
            }
            f1.push(f1[k] + s1);
            f3.push(f3[k] + s3);
        }
        Cumulative { edges, f1, f3 }
    }

    fn at(&self, field: &RadialField, w: f64) -> (f64, f64) {
        let k = (self.edges.partition_point(|&x| x <= w).max(1) - 1).min(self.edges.len() - 2);
        let a = self.edges[k];
        let (gx, gw) = gl(6);
        let (c, h) = (0.5 * (a + w), 0.5 * (w - a));
        let (mut s1, mut s3) = (self.f1[k], self.f3[k]);
        for (xi, wi) in gx.iter().zip(gw.iter()) {
            let v = c + h * xi;
            let fv = field.eval(v);
            s1 += wi * h * fv * v;
            s3 += wi * h * fv * v * v * v;
        }
        (s1, s3)
    }
}

impl<'a> SphericalMeans<'a> {
    fn new(field: &'a RadialField, d: usize, w_max: f64) -> Self {
        let cum = if d == 3 { Some(Cumulative::build(field, w_max)) } else { None };
        let (x, w) = gl(48);
        SphericalMeans { field, d, cum, theta: (x.to_vec(), w.to_vec()) }
    }

    fn means(&self, r: f64, rho: f64) -> (f64, f64) {
        if r == 0.0 {
            return (self.field.eval(rho), 0.0);
        }
        if let Some(cum) = &self.cum {
            if rho >= 1e-3 * r && rho <= cum.edges[cum.edges.len() - 1] - r {
                // d = 3: integrate over w = |x + z| with w dw = r rho dc.
                let lo = (r - rho).abs();
                let hi = r + rho;
                let (a1, a3) = cum.at(self.field, lo);
                let (b1, b3) = cum.at(self.field, hi);
                let m = (b1 - a1) / (2.0 * r * rho);
                let i3 = b3 - a3;
                let n = (i3 - (r * r + rho * rho) * (b1 - a1)) / (4.0 * r * r * rho * rho);
                return (m, n);
            }
        }
        self.means_quadrature(r, rho)
    }

    fn means_quadrature(&self, r: f64, rho: f64) -> (f64, f64) {
        let (cx, cw) = (&self.theta.0, &self.theta.1);
        let (mut m, mut n, mut norm) = (0.0, 0.0, 0.0);
        let e = self.d as f64 - 3.0;
        for (c, wq) in cx.iter().zip(cw.iter()) {
            // Weight (1 - c^2)^{(d-3)/2} dc over c in [-1, 1].
            let wt = wq * (1.0 - c * c).powf(0.5 * e);
            let w = (r * r + rho * rho + 2.0 * r * rho * c).max(0.0).sqrt();
            let fv = self.field.eval(w);
            m += wt * fv;
            n += wt * fv * c;
            norm += wt;
        }
        (m / norm, n / norm)
    }
}

/// The s-harmonic extension `u(r, t)` of a radial function.
#[derive(Clone, Debug)]
pub struct ExtensionField {
    pub r: Vec<f64>,
    pub t_grid: Vec<f64>,
    /// `u[k][i] = u(r_i, t_k)`.
    pub u: Vec<Vec<f64>>,
    /// `int P_s(x, t) dx - 1` per slice before renormalization.
    pub normalization_defect: Vec<f64>,
}

/// Geometric t-grid up to `1e2 R` with `n` slices; the lower end shrinks as
/// `s` moves away from `1/2`.
pub fn default_t_grid(r_scale: f64, s: f64, n: usize) -> Vec<f64> {
    let e = 2.0 * s.min(1.0 - s);
    let lo = r_scale * 10f64.powf(-4.0 / e.max(0.25));
    let hi = 1e2 * r_scale;
    (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect()
}

struct Slice {
    p: Vec<f64>,
    dp_dt: Vec<f64>,
    dp_drho: Vec<f64>,
    /// Analytic mass beyond the last panel.
    tail: f64,
    defect: f64,
}

fn slice(rg: &RhoGrid, d: usize, s: f64, t: f64) -> Slice {
    let c = poisson_constant(d, s);
    let e = 0.5 * d as f64 + s;
    let mut p = Vec::with_capacity(rg.x.len());
    let mut dt = Vec::with_capacity(rg.x.len());
    let mut dr = Vec::with_capacity(rg.x.len());
    let mut total = 0.0;
    for (&x, &w) in rg.x.iter().zip(&rg.w) {
        let b = t * t + x * x;
        let base = c * t.powf(2.0 * s) * b.powf(-e);
        p.push(base);
        dt.push(base * (2.0 * s / t - 2.0 * e * t / b));
        dr.push(-base * 2.0 * e * x / b);
        total += w * base;
    }
    // Analytic tail beyond the last panel.
    let tail = sphere_area(d) * c * t.powf(2.0 * s) * rg.hi.powf(-2.0 * s) / (2.0 * s);
    Slice { p, dp_dt: dt, dp_drho: dr, tail, defect: total + tail - 1.0 }
}

/// Extension of `field` at radii `r` and times `t_grid`.
pub fn poisson_extension(field: &RadialField, d: usize, s: f64, r: &[f64], t_grid: &[f64]) -> Result<ExtensionField> {
    if !(s > 0.0 && s < 1.0) {
        return precondition("extension requires 0 < s < 1");
    }
    let t_min = t_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let t_max = t_grid.iter().copied().fold(0.0, f64::max);
    let r_max = r.iter().copied().fold(0.0, f64::max);
    let rg = RhoGrid::new(d, 1e-4 * t_min, 1e14 * t_max.max(r_max));
    let sm = SphericalMeans::new(field, d, 8.0 * (r_max + field.r_max));
    let means: Vec<Vec<f64>> = r.iter().map(|&ri| rg.x.iter().map(|&x| sm.means(ri, x).0).collect()).collect();
    let far = field.far_eval(rg.hi);
    let mut u = Vec::with_capacity(t_grid.len());
    let mut defects = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let sl = slice(&rg, d, s, t);
        let norm = 1.0 + sl.defect;
        u.push(
            means
                .iter()
                .map(|m| {
                    let near: f64 = m.iter().zip(&sl.p).zip(&rg.w).map(|((mv, pv), w)| mv * pv * w).sum();
                    (near + far * sl.tail) / norm
                })
                .collect(),
        );
        defects.push(sl.defect);
    }
    Ok(ExtensionField { r: r.to_vec(), t_grid: t_grid.to_vec(), u, normalization_defect: defects })
}

/// Diagnostics of the t-integration in the fractional Hamiltonian; tails are
/// measured against the integral of the absolute integrand.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TIntegralReport {
    pub max_tail_fraction: f64,
    pub max_normalization_defect: f64,
}

/// `H(x) = d_s int t^{1-2s} (|grad_x u|^2 - |d_t u|^2) dt - V |f - tau|^2` at radii `r`.
pub fn fractional_hamiltonian(
    sol: &ScatteringSolution,
    r: &[f64],
    t_grid: &[f64],
) -> Result<(HamiltonianProfile, TIntegralReport)> {
    let prob = &sol.problem;
    let s = prob.s;
    if !(s > 0.0 && s < 1.0) {
        return precondition("the fractional Hamiltonian requires 0 < s < 1");
    }
    if t_grid.len() < 8 || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return precondition("t-grid must be increasing with at least 8 slices");
    }
    let d = prob.params.d;
    let field = &sol.field;
    let r_max = r.iter().copied().fold(0.0, f64::max);
    let rg = RhoGrid::new(d, 1e-4 * t_grid[0], 1e14 * t_grid[t_grid.len() - 1].max(r_max));
    let sm = SphericalMeans::new(field, d, 8.0 * (r_max + field.r_max));
    let f_at: Vec<f64> = r.iter().map(|&ri| if ri == 0.0 { sol.f_at_0 } else { field.eval(ri) }).collect();
    let (m, n): (Vec<Vec<f64>>, Vec<Vec<f64>>) = r
        .iter()
        .enumerate()
        .map(|(i, &ri)| {
            let (mm, nn): (Vec<f64>, Vec<f64>) = rg
                .x
                .iter()
                .map(|&x| {
                    let (a, b) = sm.means(ri, x);
                    (a - f_at[i], b)
                })
                .unzip();
            (mm, nn)
        })
        .unzip();
    let far = field.far_eval(rg.hi);
    let nt = t_grid.len();
    let mut integrand = vec![vec![0.0; nt]; r.len()];
    let mut max_defect: f64 = 0.0;
    for (k, &t) in t_grid.iter().enumerate() {
        let sl = slice(&rg, d, s, t);
        max_defect = max_defect.max(sl.defect.abs());
        let norm = 1.0 + sl.defect;
        for i in 0..r.len() {
            let mut ut = (far - f_at[i]) * 2.0 * s * sl.tail / t;
            let mut ur = 0.0;
            for q in 0..rg.x.len() {
                ut += rg.w[q] * sl.dp_dt[q] * m[i][q];
                ur -= rg.w[q] * sl.dp_drho[q] * n[i][q];
            }
            ut /= norm;
            ur /= norm;
            if r[i] == 0.0 {
                ur = 0.0;
            }
            integrand[i][k] = t.powf(1.0 - 2.0 * s) * (ur * ur - ut * ut);
        }
    }
    let ds = d_s(s);
    let v_nodes = resample_v(prob, &sol.f.grid);
    let v_field = RadialField::new(&RadialProfile::new(sol.f.grid.clone(), v_nodes)?, FarField::Constant(0.0));
    let mut h = Vec::with_capacity(r.len());
    let mut max_tail: f64 = 0.0;
    for i in 0..r.len() {
        let (value, tail) = integrate_log(t_grid, &integrand[i]);
        let vi = if r[i] > prob.support_radius {
            0.0
        } else if r[i] == 0.0 {
            let (a, b) = (v_field.values[0], v_field.values[1]);
            let (x0, x1) = (v_field.nodes[0], v_field.nodes[1]);
            (a * x1 * x1 - b * x0 * x0) / (x1 * x1 - x0 * x0)
        } else {
            v_field.eval(r[i])
        };
        let hv = ds * value - vi * (f_at[i] - prob.tau).powi(2);
        let abs_row: Vec<f64> = integrand[i].iter().map(|v| v.abs()).collect();
        let scale = value.abs().max(integrate_log(t_grid, &abs_row).0);
        if scale > 0.0 {
            max_tail = max_tail.max(tail.abs() / scale);
        }
        h.push(hv);
    }
    if max_tail > 0.01 {
        return Err(LabError::Numerical(format!("t-integral tails carry {:.3}% of the value", 100.0 * max_tail)));
    }
    let tail_estimate = far_decay_estimate(r, &h, prob.support_radius);
    Ok((
        HamiltonianProfile { kind: HamiltonianKind::Fractional, r: r.to_vec(), h, tail_estimate },
        TIntegralReport { max_tail_fraction: max_tail, max_normalization_defect: max_defect },
    ))
}

/// Trapezoid rule in `log t` with power-law tails at both ends; returns the
/// integral and the tail contribution.
fn integrate_log(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len();
    let mut sum = 0.0;
    for k in 0..n - 1 {
        let h = (t[k + 1] / t[k]).ln();
        sum += 0.5 * h * (y[k] * t[k] + y[k + 1] * t[k + 1]);
    }
    let slope = |a: usize, b: usize| -> Option<f64> {
        if y[a] != 0.0 && y[b] != 0.0 && y[a].signum() == y[b].signum() {
            Some((y[b] / y[a]).abs().ln() / (t[b] / t[a]).ln())
        } else {
            None
        }
    };
    let mut tail = 0.0;
    if let Some(b) = slope(0, 3) {
        if b > -1.0 {
            tail += y[0] * t[0] / (b + 1.0);
        } else {
            tail += y[0] * t[0];
        }
    } else {
        tail += y[0] * t[0];
    }
    if let Some(b) = slope(n - 4, n - 1) {
        if b < -1.0 {
            tail -= y[n - 1] * t[n - 1] / (b + 1.0);
        } else {
            tail += f64::INFINITY;
        }
    } else {
        tail += y[n - 1] * t[n - 1];
    }
    (sum + tail, tail)
}

/// `|H|` at the last radius predicted by a power law fitted to the outer
/// samples beyond `supp V`.
fn far_decay_estimate(r: &[f64], h: &[f64], support: f64) -> f64 {
    let idx: Vec<usize> = (0..r.len()).filter(|&i| r[i] > support && h[i] != 0.0).collect();
    if idx.len() < 4 {
        return h.last().map(|v| v.abs()).unwrap_or(0.0);
    }
    let half = &idx[idx.len() / 2..];
    let (a, b) = (half[0], *half.last().unwrap());
    let gamma_fit = (h[b] / h[a]).abs().ln() / (r[b] / r[a]).ln();
    h[a].abs() * (r[r.len() - 1] / r[a]).powf(gamma_fit)
}

/// Scattering summary written by the command line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScatteringReport {
    pub s: f64,
    pub tau: f64,
    pub f_at_0: f64,
    pub origin_margin: f64,
    pub max_monotonicity_violation: f64,
    pub residual: f64,
    pub nonmonotone_potential: bool,
    /// Birman-Schwinger margin of the same optimizer (positive iff the system is regular).
    pub bs_margin: f64,
}
