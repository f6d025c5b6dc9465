//! Radial grids, quadrature, norms and dilations.
//!
//! Every radial function lives on a cell-centred grid whose weights fold in
//! the volume element `|S^{d-1}| r^{d-1} dr`, so `sum_i w_i f(r_i)`
//! approximates the integral of `f(|x|)` over the ball of radius `R_max`.

use crate::error::{precondition, LabError, Result};
use crate::numerics::Pchip;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

/// Problem parameters `(d, lambda, p)` with coupling `chi` and mass `M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub d: usize,
    pub lambda: f64,
    pub p: f64,
    pub chi: f64,
    pub mass: f64,
}

impl Params {
    /// Parameters with `chi = 1`, `M = 1`; checks the basic invariants.
    pub fn new(d: usize, lambda: f64, p: f64) -> Result<Self> {
        let params = Params { d, lambda, p, chi: 1.0, mass: 1.0 };
        params.validate()?;
        Ok(params)
    }

    pub fn with_chi(mut self, chi: f64) -> Result<Self> {
        self.chi = chi;
        self.validate()?;
        Ok(self)
    }

    pub fn with_mass(mut self, mass: f64) -> Result<Self> {
        self.mass = mass;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return precondition("dimension d must be at least 1");
        }
        if !(self.lambda > 0.0 && self.lambda < self.d as f64) {
            return precondition(format!("lambda = {} must lie in (0, d) = (0, {})", self.lambda, self.d));
        }
        if !(self.p.is_finite() && self.p > 1.0) {
            return precondition(format!("p = {} must exceed 1", self.p));
        }
        if !(self.chi > 0.0 && self.chi.is_finite()) {
            return precondition(format!("chi = {} must be positive", self.chi));
        }
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return precondition(format!("mass M = {} must be positive", self.mass));
        }
        Ok(())
    }

    pub fn dim(&self) -> f64 {
        self.d as f64
    }

    /// `p_c = 2 / (2 - lambda/d)`.
    pub fn p_c(&self) -> f64 {
        2.0 / (2.0 - self.lambda / self.dim())
    }

    /// `1 + lambda/d`, the exponent at which the free energy is scale invariant.
    pub fn critical_p(&self) -> f64 {
        1.0 + self.lambda / self.dim()
    }

    pub fn is_critical(&self) -> bool {
        (self.p - self.critical_p()).abs() <= 1e-12
    }

    /// `p_c < p <= 2` and `d - 2 <= lambda < d`.
    pub fn check_stability_window(&self) -> Result<()> {
        self.validate()?;
        if self.p <= self.p_c() {
            return precondition(format!(
                "p = {} must exceed p_c = 2/(2 - lambda/d) = {}",
                self.p,
                self.p_c()
            ));
        }
        if self.p > 2.0 {
            return precondition(format!("p = {} must not exceed 2", self.p));
        }
        if self.lambda < self.dim() - 2.0 {
            return precondition(format!(
                "lambda = {} violates d - 2 <= lambda < d (d - 2 = {})",
                self.lambda,
                self.dim() - 2.0
            ));
        }
        Ok(())
    }

    /// `p_c < p <= 2`, or the critical exponent `p = 1 + lambda/d`.
    pub fn check_flow_window(&self) -> Result<()> {
        self.validate()?;
        if self.is_critical() {
            return Ok(());
        }
        if self.p <= self.p_c() || self.p > 2.0 {
            return precondition(format!(
                "flow requires p_c = {} < p <= 2 or p = 1 + lambda/d, got p = {}",
                self.p_c(),
                self.p
            ));
        }
        Ok(())
    }
}

/// Surface area of the unit sphere `S^{d-1}`.
pub fn sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * std::f64::consts::PI.powf(h) / gamma(h)
}

/// Volume of the ball of radius `r` in `R^d`.
pub fn ball_volume(d: usize, r: f64) -> f64 {
    sphere_area(d) * r.powi(d as i32) / d as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grading {
    Uniform,
    Geometric,
}

impl std::str::FromStr for Grading {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Grading::Uniform),
            "geometric" => Ok(Grading::Geometric),
            other => Err(LabError::Parse(format!("unknown grading '{other}'"))),
        }
    }
}

impl Grading {
    pub fn as_str(&self) -> &'static str {
        match self {
            Grading::Uniform => "uniform",
            Grading::Geometric => "geometric",
        }
    }
}

/// Cell-centred radial grid with positive weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialGrid {
    pub d: usize,
    pub r_max: f64,
    pub grading: Grading,
    /// Cell edges `0 = e_0 < e_1 < ... < e_N = R_max`.
    pub edges: Vec<f64>,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

const GEOMETRIC_STRETCH: f64 = 4.0;

/// Build a grid of `n` cells on `[0, r_max]` in dimension `d`.
pub fn make_grid(d: usize, r_max: f64, n: usize, grading: Grading) -> Result<Arc<RadialGrid>> {
    if d == 0 {
        return precondition("dimension d must be at least 1");
    }
    if !(r_max > 0.0 && r_max.is_finite()) {
        return precondition(format!("R_max = {r_max} must be positive"));
    }
    if n < 16 {
        return precondition(format!("N = {n} must be at least 16"));
    }
    let area = sphere_area(d);
    let (edges, nodes, weights) = match grading {
        Grading::Uniform => {
            let h = r_max / n as f64;
            let edges: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
            let nodes: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
            let mut weights: Vec<f64> = nodes.iter().map(|r| area * r.powi(d as i32 - 1) * h).collect();
            // Last cell absorbs the midpoint defect so the weights sum to the ball volume.
            let defect = ball_volume(d, r_max) - weights.iter().sum::<f64>();
            weights[n - 1] += defect;
            (edges, nodes, weights)
        }
        Grading::Geometric => {
            let g = GEOMETRIC_STRETCH;
            let scale = r_max / (g.exp() - 1.0);
            let mut edges: Vec<f64> = (0..=n).map(|i| scale * ((g * i as f64 / n as f64).exp() - 1.0)).collect();
            edges[n] = r_max;
            let nodes: Vec<f64> = edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
            let weights: Vec<f64> = edges
                .windows(2)
                .map(|e| area / d as f64 * (e[1].powi(d as i32) - e[0].powi(d as i32)))
                .collect();
            (edges, nodes, weights)
        }
    };
    Ok(Arc::new(RadialGrid { d, r_max, grading, edges, nodes, weights }))
}

impl RadialGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Stable identifier used for cache keys.
    pub fn key(&self) -> String {
        format!("d={};R={:e};N={};{}", self.d, self.r_max, self.len(), self.grading.as_str())
    }

    pub fn same_as(&self, other: &RadialGrid) -> bool {
        self.d == other.d
            && self.r_max == other.r_max
            && self.grading == other.grading
            && self.nodes.len() == other.nodes.len()
    }

    /// Area of the sphere through interior edge `k` (1 <= k < N).
    pub fn edge_area(&self, k: usize) -> f64 {
        sphere_area(self.d) * self.edges[k].powi(self.d as i32 - 1)
    }
}

/// A real function sampled at the nodes of a grid.
#[derive(Clone, Debug)]
pub struct RadialProfile {
    pub grid: Arc<RadialGrid>,
    pub values: Vec<f64>,
}

impl RadialProfile {
    pub fn new(grid: Arc<RadialGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return precondition(format!("profile has {} values for a grid of {}", values.len(), grid.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LabError::Numerical(format!("non-finite profile value at node {i}")));
        }
        Ok(RadialProfile { grid, values })
    }

    pub fn zeros(grid: Arc<RadialGrid>) -> Self {
        let n = grid.len();
        RadialProfile { grid, values: vec![0.0; n] }
    }

    pub fn from_fn(grid: Arc<RadialGrid>, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes.iter().map(|&r| f(r)).collect();
        RadialProfile { grid, values }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        RadialProfile { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn check_same_grid(&self, other: &RadialProfile) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            precondition("profiles live on different grids")
        }
    }

    /// Quadrature value of the integral over `R^d`.
    pub fn integrate(&self) -> f64 {
        integrate(self)
    }

    pub fn lp_norm(&self, q: f64) -> Result<f64> {
        lp_norm(self, q)
    }

    /// Weighted inner product `sum_i w_i f_i g_i`.
    pub fn dot(&self, other: &RadialProfile) -> f64 {
        self.grid
            .weights
            .iter()
            .zip(self.values.iter().zip(&other.values))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    /// Integral of `|f|^q` (no root taken).
    pub fn power_integral(&self, q: f64) -> f64 {
        self.grid.weights.iter().zip(&self.values).map(|(w, v)| w * v.abs().powf(q)).sum()
    }

    pub fn rescale(&self, kappa: f64) -> Result<RadialProfile> {
        rescale(self, kappa)
    }

    /// CSV with header `r,value`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(48 * self.len());
        s.push_str("r,value\n");
        for (r, v) in self.grid.nodes.iter().zip(&self.values) {
            let _ = writeln!(s, "{r:.16e},{v:.16e}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parse a profile CSV written by [`RadialProfile::to_csv`] onto `grid`.
    pub fn from_csv(grid: Arc<RadialGrid>, text: &str) -> Result<RadialProfile> {
        let mut lines = text.lines();
        match lines.next() {
            Some("r,value") => {}
            other => return Err(LabError::Parse(format!("bad profile header {other:?}"))),
        }
        let mut values = Vec::with_capacity(grid.len());
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let mut parts = line.split(',');
            let r: f64 = parse_field(parts.next(), i)?;
            let v: f64 = parse_field(parts.next(), i)?;
            match grid.nodes.get(i) {
                Some(&ri) if (ri - r).abs() <= 1e-12 * ri.abs().max(1.0) => values.push(v),
                _ => return Err(LabError::Parse(format!("row {i}: r = {r} does not match the grid"))),
            }
        }
        RadialProfile::new(grid, values)
    }
}

fn parse_field(s: Option<&str>, row: usize) -> Result<f64> {
    s.and_then(|t| t.trim().parse().ok())
        .ok_or_else(|| LabError::Parse(format!("row {row}: malformed number")))
}

/// `sum_i w_i rho_i`.
pub fn integrate(rho: &RadialProfile) -> f64 {
    rho.grid.weights.iter().zip(&rho.values).map(|(w, v)| w * v).sum()
}

/// `(integral |rho|^q)^{1/q}` for `q >= 1`.
pub fn lp_norm(rho: &RadialProfile, q: f64) -> Result<f64> {
    if !(q >= 1.0) {
        return precondition(format!("L^q norm requires q >= 1, got {q}"));
    }
    Ok(rho.power_integral(q).powf(1.0 / q))
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return precondition(format!("dilation factor kappa = {kappa} must be positive"));
    }
    Ok(())
}

/// `x -> kappa^d rho(kappa x)`, resampled by piecewise-linear interpolation.
///
/// The profile is extended evenly through the origin, held constant on the
/// last half cell and set to zero beyond `R_max`.
pub fn rescale(rho: &RadialProfile, kappa: f64) -> Result<RadialProfile> {
    check_kappa(kappa)?;
    let g = &rho.grid;
    let nodes = &g.nodes;
    let v = &rho.values;
    let n = nodes.len();
    let scale = kappa.powi(g.d as i32);
    let sample = |t: f64| -> f64 {
        if t <= nodes[0] {
            return v[0];
        }
        if t >= nodes[n - 1] {
            return if t <= g.r_max { v[n - 1] } else { 0.0 };
        }
        let k = nodes.partition_point(|&x| x <= t) - 1;
        let s = (t - nodes[k]) / (nodes[k + 1] - nodes[k]);
        v[k] + s * (v[k + 1] - v[k])
    };
    let values = nodes.iter().map(|&r| scale * sample(kappa * r)).collect();
    RadialProfile::new(g.clone(), values)
}

/// Monotone cubic (PCHIP) interpolant of a profile, evenly extended through
/// the origin and zero beyond `R_max`.
#[derive(Clone, Debug)]
pub struct SmoothProfile {
    pchip: Pchip,
    last: f64,
    r_last: f64,
    r_max: f64,
}

impl SmoothProfile {
    pub fn new(rho: &RadialProfile) -> Self {
        let g = &rho.grid;
        let n = g.len();
        let mut x = Vec::with_capacity(n + 2);
        let mut y = Vec::with_capacity(n + 2);
        x.push(-g.nodes[1]);
        y.push(rho.values[1]);
        x.push(-g.nodes[0]);
        y.push(rho.values[0]);
        x.extend_from_slice(&g.nodes);
        y.extend_from_slice(&rho.values);
        SmoothProfile { pchip: Pchip::new(x, y), last: rho.values[n - 1], r_last: g.nodes[n - 1], r_max: g.r_max }
    }

    /// Value and radial derivative at radius `t >= 0`.
    pub fn eval_with_deriv(&self, t: f64) -> (f64, f64) {
        if t > self.r_max {
            (0.0, 0.0)
        } else if t >= self.r_last {
            (self.last, 0.0)
        } else {
            self.pchip.eval_with_deriv(t)
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.eval_with_deriv(t).0
    }
}

/// As [`rescale`] but with monotone cubic interpolation.
pub fn rescale_smooth(rho: &RadialProfile, kappa: f64) -> Result<RadialProfile> {
    check_kappa(kappa)?;
    let sp = SmoothProfile::new(rho);
    let scale = kappa.powi(rho.grid.d as i32);
    let values = rho.grid.nodes.iter().map(|&r| scale * sp.eval(kappa * r)).collect();
    RadialProfile::new(rho.grid.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_areas() {
        let pi = std::f64::consts::PI;
        assert!((sphere_area(1) - 2.0).abs() < 1e-14);
        assert!((sphere_area(2) - 2.0 * pi).abs() < 1e-13);
        assert!((sphere_area(3) - 4.0 * pi).abs() < 1e-13);
        assert!((ball_volume(3, 1.0) - 4.0 * pi / 3.0).abs() < 1e-13);
    }

    #[test]
    fn window_checks() {
        let p = Params::new(3, 1.0, 4.0 / 3.0).unwrap();
        assert!(p.check_stability_window().is_ok());
        assert!((p.p_c() - 1.2).abs() < 1e-15);
        assert!(p.is_critical());
        assert!(Params::new(3, 1.0, 1.19).unwrap().check_stability_window().is_err());
        assert!(Params::new(3, 0.5, 4.0 / 3.0).unwrap().check_stability_window().is_err());
        assert!(Params::new(3, 3.0, 1.5).is_err());
        assert!(Params::new(3, 1.0, 1.5).unwrap().with_chi(-1.0).is_err());
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(make_grid(3, 0.0, 100, Grading::Uniform).is_err());
        assert!(make_grid(3, 1.0, 15, Grading::Uniform).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let g = make_grid(3, 2.0, 20, Grading::Uniform).unwrap();
        let rho = RadialProfile::from_fn(g.clone(), |r| (-r * r).exp());
        let back = RadialProfile::from_csv(g, &rho.to_csv()).unwrap();
        assert_eq!(back.values, rho.values);
    }
}
