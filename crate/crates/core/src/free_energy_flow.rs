//! Free energy `F(rho) = (1/(p-1)) int rho^p - (chi/2) D(rho, rho)`, its
//! closed-form minimal values, and a radial finite-volume gradient flow
//! with dissipation and mass certificates.

use crate::error::{precondition, LabError, Result};
use crate::optimizer::OptimizerSolution;
use crate::radial_core::{ball_volume, make_grid, Params, RadialGrid, RadialProfile, SmoothProfile};
use crate::riesz_kernel::{channel_kernel, pair_energy, ChannelKernel};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::Arc;

pub fn free_energy(rho: &RadialProfile, params: &Params) -> Result<f64> {
    if !rho.is_nonnegative() {
        return precondition("free energy requires a nonnegative density");
    }
    let p = params.p;
    Ok(rho.power_integral(p) / (p - 1.0) - 0.5 * params.chi * pair_energy(rho, rho, params)?)
}

/// `x -> a^{-d} rho(x / a)` represented exactly on the grid dilated by `a`.
pub fn dilate(rho: &RadialProfile, a: f64) -> Result<RadialProfile> {
    if !(a > 0.0 && a.is_finite()) {
        return precondition(format!("dilation factor a = {a} must be positive"));
    }
    let g = &rho.grid;
    let grid = make_grid(g.d, a * g.r_max, g.len(), g.grading)?;
    let s = a.powi(-(g.d as i32));
    RadialProfile::new(grid, rho.values.iter().map(|v| s * v).collect())
}

/// Regime of the minimal free energy at fixed mass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `p > 1 + lambda/d`: finite minimum attained by a rescaled optimizer.
    Subcritical,
    /// `p = 1 + lambda/d`, `M <= M_c`: `F_M = 0`.
    CriticalBounded,
    /// `p = 1 + lambda/d`, `M > M_c`, or `p < 1 + lambda/d`: `F_M = -inf`.
    Unbounded,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryValues {
    pub alpha_exp: f64,
    pub f_m: f64,
    pub m_c: Option<f64>,
    pub p_m: Option<f64>,
    pub regime: Regime,
}

pub fn theory_values(params: &Params, a: f64) -> Result<TheoryValues> {
    params.validate()?;
    if !(a > 0.0) {
        return precondition("sharp constant a must be positive");
    }
    let (d, l, p, chi, m) = (params.dim(), params.lambda, params.p, params.chi, params.mass);
    let alpha = l / (d * (p - 1.0));
    if params.is_critical() {
        let m_c = (2.0 * d / (chi * l * a)).powf(d / (d - l));
        let (f_m, regime) = if m <= m_c { (0.0, Regime::CriticalBounded) } else { (f64::NEG_INFINITY, Regime::Unbounded) };
        return Ok(TheoryValues { alpha_exp: 1.0, f_m, m_c: Some(m_c), p_m: None, regime });
    }
    if alpha >= 1.0 {
        return Ok(TheoryValues { alpha_exp: alpha, f_m: f64::NEG_INFINITY, m_c: None, p_m: None, regime: Regime::Unbounded });
    }
    let p_m = (chi * l * a * m.powf(2.0 - p * alpha) / (2.0 * d)).powf(1.0 / (1.0 - alpha));
    Ok(TheoryValues {
        alpha_exp: alpha,
        f_m: d / l * (alpha - 1.0) * p_m,
        m_c: None,
        p_m: Some(p_m),
        regime: Regime::Subcritical,
    })
}

/// Unit-mass dilation `kappa^d ell(kappa x)` of `ell` with `int ell_chi^p = P`,
/// sampled on `grid` by monotone cubic interpolation.
pub fn scale_to_lchi_on(ell: &RadialProfile, p_target: f64, p: f64, grid: &Arc<RadialGrid>) -> Result<RadialProfile> {
    if !(p_target > 0.0) {
        return precondition("target p-norm must be positive");
    }
    if grid.d != ell.grid.d {
        return precondition("dimension mismatch between profile and target grid");
    }
    let d = grid.d as f64;
    let kappa = (p_target / ell.power_integral(p)).powf(1.0 / (d * (p - 1.0)));
    let sp = SmoothProfile::new(ell);
    let s = kappa.powf(d);
    let raw = RadialProfile::new(grid.clone(), grid.nodes.iter().map(|&r| s * sp.eval(kappa * r).max(0.0)).collect())?;
    let mass = raw.integrate();
    Ok(raw.scaled(1.0 / mass))
}

pub fn scale_to_lchi(ell: &RadialProfile, p_target: f64, p: f64) -> Result<RadialProfile> {
    scale_to_lchi_on(ell, p_target, p, &ell.grid)
}

/// `g_alpha(x) = x - x^alpha / alpha + 1/alpha - 1`.
pub fn g_alpha(x: f64, alpha: f64) -> f64 {
    if x <= 0.0 {
        return 1.0 / alpha - 1.0;
    }
    let l = x.ln();
    l.exp_m1() - (alpha * l).exp_m1() / alpha
}

/// Largest `C` with `g_alpha(x) >= C (sqrt x - 1)^2` on a logarithmic scan of `[0, 1e8]`.
pub fn fit_c_alpha(alpha: f64) -> f64 {
    let mut c = 1.0 / alpha - 1.0;
    // Limits at x = 1 and x -> infinity.
    c = c.min(2.0 * (1.0 - alpha)).min(1.0);
    for i in 0..=20000 {
        let x = 10f64.powf(-8.0 + 16.0 * i as f64 / 20000.0);
        let den = (0.5 * x.ln()).exp_m1().powi(2);
        if den > 1e-10 {
            c = c.min(g_alpha(x, alpha) / den);
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryGap {
    pub lhs: f64,
    pub distance_sq: f64,
    pub quotient: f64,
    pub degenerate: bool,
}

/// `F(rho) - F_1` against `int (rho^{p/2} - ell_chi^{p/2})^2` for unit-mass `rho`.
pub fn corollary_gap(rho: &RadialProfile, sol: &OptimizerSolution, params: &Params) -> Result<CorollaryGap> {
    let mass = rho.integrate();
    if (mass - 1.0).abs() > 1e-8 {
        return precondition(format!("density must have unit mass, got {mass}"));
    }
    let unit = Params { mass: 1.0, ..*params };
    let tv = theory_values(&unit, sol.a)?;
    let p_m = tv.p_m.ok_or_else(|| LabError::Precondition("corollary requires p > 1 + lambda/d".into()))?;
    let lchi = scale_to_lchi_on(&sol.ell, p_m, params.p, &rho.grid)?;
    let lhs = free_energy(rho, &unit)? - tv.f_m;
    let half = 0.5 * params.p;
    let dist: f64 = rho
        .grid
        .weights
        .iter()
        .zip(rho.values.iter().zip(&lchi.values))
        .map(|(w, (a, b))| w * (a.powf(half) - b.powf(half)).powi(2))
        .sum();
    let degenerate = dist < 1e-12;
    Ok(CorollaryGap { lhs, distance_sq: dist, quotient: if dist > 0.0 { lhs / dist } else { f64::NAN }, degenerate })
}

/// `(rho / M, M^{2-p} chi)`; time runs as `t -> M^{1-p} t`.
pub fn mass_normalize(rho: &RadialProfile, chi: f64, mass: f64, p: f64) -> Result<(RadialProfile, f64)> {
    if !(mass > 0.0) {
        return precondition("mass must be positive");
    }
    Ok((rho.scaled(1.0 / mass), mass.powf(2.0 - p) * chi))
}

/// Normalized Gaussian of mass `M` and width `sigma`.
pub fn gaussian(grid: &Arc<RadialGrid>, sigma: f64, mass: f64) -> Result<RadialProfile> {
    if !(sigma > 0.0) {
        return precondition("Gaussian width must be positive");
    }
    let raw = RadialProfile::from_fn(grid.clone(), |r| (-0.5 * (r / sigma).powi(2)).exp());
    let m = raw.integrate();
    Ok(raw.scaled(mass / m))
}

#[derive(Clone, Debug)]
pub struct FlowState {
    pub rho: RadialProfile,
    pub t: f64,
    pub energy: f64,
    pub dt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub energy: f64,
    pub mass: f64,
    pub dt: f64,
    pub accepted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Converged,
    TimeReached,
    BudgetExhausted,
    /// Density exceeded the resolvable bound; no finite-time claim is made.
    UnresolvedConcentration,
}

impl StopReason {
    pub fn label(&self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::TimeReached => "time reached",
            StopReason::BudgetExhausted => "budget exhausted",
            StopReason::UnresolvedConcentration => "unresolved concentration",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowTrace {
    pub rows: Vec<TraceRow>,
    pub final_state: FlowState,
    pub stop: StopReason,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Largest relative energy increase over accepted steps (<= 0 when dissipative).
    pub max_energy_increase: f64,
    /// `|mass_final - mass_initial| / mass_initial`.
    pub mass_drift: f64,
    /// Energy at every accepted step, in order (initial energy first).
    pub energies: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopSpec {
    /// Relative energy change over `window` accepted steps below which the run stops.
    pub tol: f64,
    pub window: usize,
    pub max_steps: usize,
    pub t_end: Option<f64>,
    pub dt0: f64,
    /// Maximum density the grid can resolve; defaults to mass in ten innermost cells.
    pub rho_bound: Option<f64>,
    /// Keep every k-th accepted step in the trace rows; rejections are always kept.
    pub record_every: usize,
}

impl Default for StopSpec {
    fn default() -> Self {
        StopSpec { tol: 1e-10, window: 1000, max_steps: 5_000_000, t_end: None, dt0: 1e-6, rho_bound: None, record_every: 100 }
    }
}

/// Relative slack in the dissipation certificate.
pub const ENERGY_SLACK: f64 = 1e-10;

/// Radial finite-volume discretization of `d_t rho = div(rho grad xi)` with
/// `xi = p/(p-1) rho^{p-1} - chi rho * |x|^{-lambda}`.
pub struct FlowOperator {
    pub params: Params,
    pub grid: Arc<RadialGrid>,
    kernel: Arc<ChannelKernel>,
    areas: Vec<f64>,
    spacing: Vec<f64>,
}

impl FlowOperator {
    pub fn new(params: &Params, grid: &Arc<RadialGrid>) -> Result<Self> {
        params.check_flow_window()?;
        let n = grid.len();
        let kernel = channel_kernel(params, grid, 0)?;
        let areas = (1..n).map(|k| grid.edge_area(k)).collect();
        let spacing = grid.nodes.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(FlowOperator { params: *params, grid: grid.clone(), kernel, areas, spacing })
    }

    /// Active prefix: all nodes beyond it carry zero density.
    fn active(rho: &[f64]) -> usize {
        rho.iter().rposition(|&v| v > 0.0).map(|i| i + 1).unwrap_or(0)
    }

    /// Potential `rho * |x|^{-lambda}` at all nodes.
    pub fn potential(&self, rho: &[f64]) -> Vec<f64> {
        let n = rho.len();
        let na = Self::active(rho);
        let w = &self.grid.weights;
        let wr: Vec<f64> = (0..na).map(|j| w[j] * rho[j]).collect();
        let mut out = vec![0.0; n];
        let data = self.kernel.matrix.as_slice();
        for (j, &c) in wr.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let col = &data[j * n..(j + 1) * n];
            for (o, k) in out.iter_mut().zip(col) {
                *o += k * c;
            }
        }
        out
    }

    pub fn energy_with(&self, rho: &[f64], phi: &[f64]) -> f64 {
        let p = self.params.p;
        let w = &self.grid.weights;
        let mut e = 0.0;
        for i in 0..rho.len() {
            if rho[i] > 0.0 {
                e += w[i] * (rho[i].powf(p) / (p - 1.0) - 0.5 * self.params.chi * rho[i] * phi[i]);
            }
        }
        e
    }

    pub fn chemical_potential(&self, rho: &[f64], phi: &[f64]) -> Vec<f64> {
        let p = self.params.p;
        rho.iter().zip(phi).map(|(r, f)| p / (p - 1.0) * r.max(0.0).powf(p - 1.0) - self.params.chi * f).collect()
    }

    /// Interface fluxes `A rho_up v` with `v = -d xi / dr`, outward positive.
    pub fn fluxes(&self, rho: &[f64], phi: &[f64]) -> Vec<f64> {
        let xi = self.chemical_potential(rho, phi);
        (0..rho.len() - 1)
            .map(|k| {
                let v = -(xi[k + 1] - xi[k]) / self.spacing[k];
                let up = if v > 0.0 { rho[k] } else { rho[k + 1] };
                self.areas[k] * up * v
            })
            .collect()
    }

    /// One explicit Euler step of size `dt` (no acceptance test).
    pub fn euler(&self, rho: &[f64], phi: &[f64], dt: f64) -> Vec<f64> {
        let f = self.fluxes(rho, phi);
        let w = &self.grid.weights;
        let n = rho.len();
        (0..n)
            .map(|i| {
                let out = if i + 1 < n { f[i] } else { 0.0 };
                let inn = if i > 0 { f[i - 1] } else { 0.0 };
                rho[i] - dt / w[i] * (out - inn)
            })
            .collect()
    }

    /// Sup of `|d xi / dr|` over interfaces with both neighbours above `threshold`.
    pub fn stationarity(&self, rho: &[f64], threshold: f64) -> f64 {
        let phi = self.potential(rho);
        let xi = self.chemical_potential(rho, &phi);
        (0..rho.len() - 1)
            .filter(|&k| rho[k] > threshold && rho[k + 1] > threshold)
            .map(|k| ((xi[k + 1] - xi[k]) / self.spacing[k]).abs())
            .fold(0.0, f64::max)
    }

    pub fn state(&self, rho: RadialProfile, dt: f64) -> Result<FlowState> {
        if !rho.grid.same_as(&self.grid) {
            return precondition("initial density lives on a different grid");
        }
        if !rho.is_nonnegative() {
            return precondition("initial density must be nonnegative");
        }
        let phi = self.potential(&rho.values);
        let energy = self.energy_with(&rho.values, &phi);
        Ok(FlowState { rho, t: 0.0, energy, dt })
    }

    /// One accepted step; `dt` is halved until the certificates hold.
    pub fn flow_step(&self, state: &FlowState) -> Result<(FlowState, usize)> {
        let phi = self.potential(&state.rho.values);
        let mut dt = state.dt;
        let mut rejections = 0;
        loop {
            if let Some((next, _, e)) = self.try_step(&state.rho.values, &phi, state.energy, dt) {
                let rho = RadialProfile::new(self.grid.clone(), next)?;
                return Ok((FlowState { rho, t: state.t + dt, energy: e, dt }, rejections));
            }
            rejections += 1;
            dt *= 0.5;
            if dt < 1e-12 * self.time_scale() {
                return Err(LabError::Numerical(format!("time step underflow at t = {}", state.t)));
            }
        }
    }

    fn try_step(&self, rho: &[f64], phi: &[f64], e0: f64, dt: f64) -> Option<(Vec<f64>, Vec<f64>, f64)> {
        let next = self.euler(rho, phi, dt);
        if next.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return None;
        }
        let phin = self.potential(&next);
        let e = self.energy_with(&next, &phin);
        if e > e0 + ENERGY_SLACK * e0.abs() {
            return None;
        }
        Some((next, phin, e))
    }

    /// Diffusive time scale `R_max^2`.
    pub fn time_scale(&self) -> f64 {
        self.grid.r_max * self.grid.r_max
    }

    pub fn default_rho_bound(&self, mass: f64) -> f64 {
        let r10 = self.grid.edges[10.min(self.grid.len())];
        mass / ball_volume(self.grid.d, r10)
    }

    pub fn run_flow(&self, init: FlowState, stop: &StopSpec) -> Result<FlowTrace> {
        if stop.window == 0 || stop.record_every == 0 || !(stop.dt0 > 0.0) {
            return precondition("stop window, record interval and initial step must be positive");
        }
        let mass0 = init.rho.integrate();
        let bound = stop.rho_bound.unwrap_or_else(|| self.default_rho_bound(mass0));
        let mut rho = init.rho.values.clone();
        let mut phi = self.potential(&rho);
        let mut energy = self.energy_with(&rho, &phi);
        let mut t = init.t;
        let mut dt = if init.dt > 0.0 { init.dt } else { stop.dt0 };
        let mut rows = vec![TraceRow { t, energy, mass: mass0, dt, accepted: true }];
        let mut energies = vec![energy];
        let (mut accepted, mut rejected) = (0usize, 0usize);
        let mut max_inc = f64::NEG_INFINITY;
        let w = self.grid.weights.clone();
        let mass_of = |r: &[f64]| -> f64 { r.iter().zip(&w).map(|(a, b)| a * b).sum() };
        let reason = loop {
            if accepted >= stop.max_steps {
                break StopReason::BudgetExhausted;
            }
            if let Some(te) = stop.t_end {
                if t >= te * (1.0 - 1e-14) {
                    break StopReason::TimeReached;
                }
                dt = dt.min(te - t);
            }
            match self.try_step(&rho, &phi, energy, dt) {
                Some((next, phin, e)) => {
                    let inc = (e - energy) / energy.abs().max(f64::MIN_POSITIVE);
                    max_inc = max_inc.max(inc);
                    rho = next;
                    phi = phin;
                    energy = e;
                    t += dt;
                    accepted += 1;
                    energies.push(energy);
                    if accepted % stop.record_every == 0 {
                        rows.push(TraceRow { t, energy, mass: mass_of(&rho), dt, accepted: true });
                    }
                    dt *= 1.1;
                    if rho.iter().copied().fold(0.0, f64::max) > bound {
                        break StopReason::UnresolvedConcentration;
                    }
                    if stop.t_end.is_none() && energies.len() > stop.window {
                        let old = energies[energies.len() - 1 - stop.window];
                        if (energy - old).abs() < stop.tol * energy.abs() {
                            break StopReason::Converged;
                        }
                    }
                }
                None => {
                    rejected += 1;
                    rows.push(TraceRow { t, energy, mass: mass_of(&rho), dt, accepted: false });
                    dt *= 0.5;
                    if dt < 1e-12 * self.time_scale() {
                        return Err(LabError::Numerical(format!("time step underflow at t = {t}")));
                    }
                }
            }
        };
        let mass = mass_of(&rho);
        if rows.last().map(|r| r.t) != Some(t) {
            rows.push(TraceRow { t, energy, mass, dt, accepted: true });
        }
        Ok(FlowTrace {
            rows,
            final_state: FlowState { rho: RadialProfile::new(self.grid.clone(), rho)?, t, energy, dt },
            stop: reason,
            accepted_steps: accepted,
            rejected_steps: rejected,
            max_energy_increase: max_inc,
            mass_drift: (mass - mass0).abs() / mass0,
            energies,
        })
    }
}

impl FlowTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,energy,mass,dt,accepted\n");
        for r in &self.rows {
            let _ = writeln!(out, "{:.16e},{:.16e},{:.16e},{:.16e},{}", r.t, r.energy, r.mass, r.dt, r.accepted as u8);
        }
        out
    }

    /// True when `|F|` decreases over the last `window` accepted steps.
    pub fn abs_energy_decreasing(&self, window: usize) -> bool {
        let e = &self.energies;
        let start = e.len().saturating_sub(window + 1);
        e[start..].windows(2).all(|w| w[1].abs() <= w[0].abs())
    }
}
