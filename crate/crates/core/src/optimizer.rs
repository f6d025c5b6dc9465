//! Fixed-point solver for the Euler-Lagrange equation of the Lane-Emden
//! inequality,
//!
//! `p lambda a / (2 d (p-1)) ell^{p-1} = [ell * |x|^{-lambda} - mu]_+`,
//!
//! with the doubly normalised optimizer `||ell||_1 = ||ell||_p = 1`.

use crate::error::{precondition, LabError, Result};
use crate::numerics::brent_root;
use crate::radial_core::{ball_volume, make_grid, Grading, Params, RadialGrid, RadialProfile};
use crate::riesz_kernel::{channel_kernel, ChannelKernel};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Blending factor theta in (0, 1].
    pub damping: f64,
    pub max_iter: usize,
    /// Target for the Euler-Lagrange residual.
    pub tol: f64,
    /// Stop once successive iterates differ by less than this (sup norm, relative).
    pub step_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { damping: 0.5, max_iter: 5000, tol: 1e-6, step_tol: 1e-13 }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return precondition(format!("damping {} must lie in (0, 1]", self.damping));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) || !(self.step_tol > 0.0) {
            return precondition("max_iter, tol and step_tol must be positive");
        }
        Ok(())
    }
}

/// Converged optimizer with its constants and diagnostics.
#[derive(Clone, Debug)]
pub struct OptimizerSolution {
    pub params: Params,
    pub grid: Arc<RadialGrid>,
    pub ell: RadialProfile,
    /// `ell * |x|^{-lambda}` at the nodes.
    pub potential: RadialProfile,
    /// Potential at the origin.
    pub potential_at_origin: f64,
    pub a: f64,
    pub mu: f64,
    pub support_radius: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Euler-Lagrange residual after every iteration.
    pub history: Vec<f64>,
}

/// Closed-form constants derived from `(d, lambda, p)` and `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub p_c: f64,
    pub s: f64,
    pub mu: f64,
    pub alpha: f64,
    pub tau: f64,
    pub threshold: f64,
}

pub fn derived_constants(params: &Params, a: f64) -> DerivedConstants {
    let d = params.dim();
    let (l, p) = (params.lambda, params.p);
    let mu = a * (1.0 - p * l / (2.0 * d * (p - 1.0)));
    DerivedConstants {
        p_c: params.p_c(),
        s: 0.5 * (d - l),
        mu,
        alpha: 2.0 * l * p * p * a / (d * (p - 1.0)) * (l / (d * (p - 1.0)) - 1.0),
        tau: mu * (1.0 - l / d),
        threshold: 2.0 * p * l * a / d,
    }
}

/// `p lambda a / (2 d (p-1))`, the coefficient of `ell^{p-1}`.
pub fn el_coefficient(params: &Params, a: f64) -> f64 {
    params.p * params.lambda * a / (2.0 * params.dim() * (params.p - 1.0))
}

/// Normalisation inner solve: the `mu` for which `u = [phi - mu]_+^{1/(p-1)}`
/// satisfies `(sum w u^p) = (sum w u)^p`; returns `(mu, u / sum w u)`.
fn normalize_update(phi: &[f64], w: &[f64], p: f64) -> Result<(f64, Vec<f64>)> {
    let q = 1.0 / (p - 1.0);
    let j = |mu: f64| {
        let (mut s1, mut sp) = (0.0, 0.0);
        for (&f, &wi) in phi.iter().zip(w) {
            if f > mu {
                let u = (f - mu).powf(q);
                s1 += wi * u;
                sp += wi * u.powf(p);
            }
        }
        sp.ln() - p * s1.ln()
    };
    let pmax = phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pmin = phi.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = (pmax - pmin).max(pmax.abs() * 1e-3).max(1e-300);
    let hi = pmax - spread * 1e-12;
    if !(j(hi) > 0.0) {
        return Err(LabError::Numerical("normalisation bracket failed at the top of the potential".into()));
    }
    let mut lo = pmin;
    let mut k = 0;
    while j(lo) > 0.0 {
        k += 1;
        lo = pmax - spread * 2f64.powi(k);
        if k > 60 {
            return precondition("cannot normalise: the ball of radius R_max is too small (volume must exceed 1)");
        }
    }
    let mu = brent_root(j, lo, hi, 1e-15 * pmax.abs().max(1e-300), 400)?;
    let mut u: Vec<f64> = phi.iter().map(|&f| if f > mu { (f - mu).powf(q) } else { 0.0 }).collect();
    let mass: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
    for v in u.iter_mut() {
        *v /= mass;
    }
    Ok((mu, u))
}

fn residual_of(params: &Params, ell: &[f64], phi: &[f64], a: f64, mu: f64) -> f64 {
    let c = el_coefficient(params, a);
    let pm1 = params.p - 1.0;
    ell.iter()
        .zip(phi)
        .map(|(&l, &f)| (c * l.powf(pm1) - (f - mu).max(0.0)).abs())
        .fold(0.0, f64::max)
        / a
}

fn support_radius_of(grid: &RadialGrid, ell: &[f64]) -> f64 {
    let max = ell.iter().copied().fold(0.0, f64::max);
    ell.iter().rposition(|&v| v > 1e-14 * max).map(|i| grid.nodes[i]).unwrap_or(0.0)
}

/// Solve the Euler-Lagrange fixed point on `grid`.
pub fn solve_optimizer(params: &Params, grid: &Arc<RadialGrid>, opts: &SolveOptions) -> Result<OptimizerSolution> {
    params.check_stability_window()?;
    opts.validate()?;
    if grid.d != params.d {
        return precondition(format!("grid dimension {} differs from d = {}", grid.d, params.d));
    }
    if ball_volume(grid.d, grid.r_max) <= 1.0 {
        return precondition("R_max too small: the ball of radius R_max must have volume > 1");
    }
    let kernel = channel_kernel(params, grid, 0)?;
    solve_with_kernel(params, grid, &kernel, opts)
}

pub(crate) fn solve_with_kernel(
    params: &Params,
    grid: &Arc<RadialGrid>,
    kernel: &ChannelKernel,
    opts: &SolveOptions,
) -> Result<OptimizerSolution> {
    let w = &grid.weights;
    let r0 = grid.r_max / 3.0;
    let mut ell: Vec<f64> = grid.nodes.iter().map(|r| (1.0 - r * r / (r0 * r0)).max(0.0)).collect();
    let m: f64 = ell.iter().zip(w).map(|(a, b)| a * b).sum();
    ell.iter_mut().for_each(|v| *v /= m);

    let mut theta = opts.damping;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let phi = kernel.apply(&ell);
        let a: f64 = ell.iter().zip(w).zip(&phi).map(|((l, w), f)| l * w * f).sum();
        let (mu, new) = normalize_update(&phi, w, params.p)?;
        history.push(residual_of(params, &ell, &phi, a, mu));
        let lmax = new.iter().copied().fold(0.0, f64::max);
        let step = ell.iter().zip(&new).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / lmax;
        // The EL residual plateaus at the discretisation floor, so the damping
        // reacts to growth of the fixed-point increment instead.
        if step > last_step * 1.0001 && theta > opts.damping / 32.0 && it > 5 {
            theta *= 0.5;
        }
        last_step = step;
        if step < opts.step_tol {
            ell = new;
            converged = true;
            break;
        }
        for (l, n) in ell.iter_mut().zip(&new) {
            *l = (1.0 - theta) * *l + theta * n;
        }
    }
    assert!(ell.iter().all(|&v| v >= 0.0), "optimizer iterate lost nonnegativity");
    let phi = kernel.apply(&ell);
    let a: f64 = ell.iter().zip(w).zip(&phi).map(|((l, w), f)| l * w * f).sum();
    let (mu, _) = normalize_update(&phi, w, params.p)?;
    let residual = residual_of(params, &ell, &phi, a, mu);
    history.push(residual);
    let support_radius = support_radius_of(grid, &ell);
    if support_radius > 0.8 * grid.r_max {
        return Err(LabError::SupportTouchesBoundary { support: support_radius, limit: 0.8 * grid.r_max });
    }
    if !converged || residual > opts.tol {
        return Err(LabError::NonConvergence { iterations, residual });
    }
    let potential_at_origin = kernel.at_origin(&ell);
    Ok(OptimizerSolution {
        params: *params,
        grid: grid.clone(),
        ell: RadialProfile::new(grid.clone(), ell)?,
        potential: RadialProfile::new(grid.clone(), phi)?,
        potential_at_origin,
        a,
        mu,
        support_radius,
        residual,
        iterations,
        history,
    })
}

/// Sup-norm Euler-Lagrange defect relative to `a`.
pub fn el_residual(sol: &OptimizerSolution) -> f64 {
    residual_of(&sol.params, &sol.ell.values, &sol.potential.values, sol.a, sol.mu)
}

/// Euler-Lagrange defect of an arbitrary profile, with `a = D(rho, rho)` and
/// the `mu` from the normalisation solve.
pub fn el_residual_of_profile(rho: &RadialProfile, params: &Params) -> Result<f64> {
    let kernel = channel_kernel(params, &rho.grid, 0)?;
    let phi = kernel.apply(&rho.values);
    let a = rho.dot(&RadialProfile::new(rho.grid.clone(), phi.clone())?);
    let (mu, _) = normalize_update(&phi, &rho.grid.weights, params.p)?;
    Ok(residual_of(params, &rho.values, &phi, a, mu))
}

/// `V = [mu - ell * |x|^{-lambda}]_+`.
pub fn exterior_potential(sol: &OptimizerSolution) -> RadialProfile {
    sol.potential.map(|f| (sol.mu - f).max(0.0))
}

impl OptimizerSolution {
    pub fn constants(&self) -> DerivedConstants {
        derived_constants(&self.params, self.a)
    }

    /// Radius where `phi - mu` crosses zero (linear interpolation between nodes).
    pub fn support_edge(&self) -> f64 {
        let g = &self.grid.nodes;
        let f: Vec<f64> = self.potential.values.iter().map(|v| v - self.mu).collect();
        match f.iter().position(|&v| v <= 0.0) {
            Some(0) => 0.0,
            Some(i) => g[i - 1] + f[i - 1] / (f[i - 1] - f[i]) * (g[i] - g[i - 1]),
            None => self.grid.r_max,
        }
    }

    /// Relative defect of `mu = a (1 - p lambda / (2 d (p-1)))`.
    pub fn mu_consistency(&self) -> f64 {
        (self.mu - self.constants().mu).abs() / self.a
    }

    pub fn sidecar(&self) -> SolutionSidecar {
        SolutionSidecar {
            d: self.params.d,
            lambda: self.params.lambda,
            p: self.params.p,
            a: self.a,
            mu: self.mu,
            support_radius: self.support_radius,
            residual: self.residual,
            n: self.grid.len(),
            r_max: self.grid.r_max,
            grading: self.grid.grading,
        }
    }

    /// Write `<stem>.csv` and `<stem>.json`; returns both paths.
    pub fn write_bundle(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{stem}.csv"));
        let json = dir.join(format!("{stem}.json"));
        self.ell.write_csv(&csv)?;
        std::fs::write(&json, serde_json::to_string_pretty(&self.sidecar())? + "\n")?;
        Ok((csv, json))
    }

    /// Rebuild a solution from a bundle written by [`OptimizerSolution::write_bundle`].
    pub fn read_bundle(dir: &Path, stem: &str, chi: f64, mass: f64) -> Result<OptimizerSolution> {
        let side: SolutionSidecar = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let params = Params::new(side.d, side.lambda, side.p)?.with_chi(chi)?.with_mass(mass)?;
        let grid = make_grid(side.d, side.r_max, side.n, side.grading)?;
        let ell = RadialProfile::from_csv(grid.clone(), &std::fs::read_to_string(dir.join(format!("{stem}.csv")))?)?;
        let kernel = channel_kernel(&params, &grid, 0)?;
        let phi = kernel.apply(&ell.values);
        let potential_at_origin = kernel.at_origin(&ell.values);
        Ok(OptimizerSolution {
            params,
            grid: grid.clone(),
            potential: RadialProfile::new(grid, phi)?,
            potential_at_origin,
            ell,
            a: side.a,
            mu: side.mu,
            support_radius: side.support_radius,
            residual: side.residual,
            iterations: 0,
            history: Vec::new(),
        })
    }
}

/// JSON sidecar of a persisted solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionSidecar {
    pub d: usize,
    pub lambda: f64,
    pub p: f64,
    pub a: f64,
    pub mu: f64,
    pub support_radius: f64,
    pub residual: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "R_max")]
    pub r_max: f64,
    #[serde(default = "default_grading")]
    pub grading: Grading,
}

fn default_grading() -> Grading {
    Grading::Uniform
}

/// `R_max = factor * R_ell` from a coarse pre-solve on a growing ball.
pub fn auto_r_max(params: &Params, factor: f64, opts: &SolveOptions) -> Result<f64> {
    params.check_stability_window()?;
    if !(factor > 1.0) {
        return precondition("R_max factor must exceed 1");
    }
    let mut r_max = 4.0;
    let coarse_opts = SolveOptions { tol: 1e-3, step_tol: 1e-10, ..*opts };
    let coarse = loop {
        let grid = make_grid(params.d, r_max, 160, Grading::Uniform)?;
        match solve_optimizer(params, &grid, &coarse_opts) {
            Ok(s) => break s,
            Err(LabError::SupportTouchesBoundary { .. }) | Err(LabError::Precondition(_)) if r_max < 1e4 => {
                r_max *= 2.0;
            }
            Err(e) => return Err(e),
        }
    };
    Ok(factor * coarse.support_edge())
}

/// Solve on a uniform grid with `R_max = factor * R_ell`.
pub fn solve_auto(params: &Params, n: usize, factor: f64, opts: &SolveOptions) -> Result<OptimizerSolution> {
    let r_max = auto_r_max(params, factor, opts)?;
    let grid = make_grid(params.d, r_max, n, Grading::Uniform)?;
    solve_optimizer(params, &grid, opts)
}
