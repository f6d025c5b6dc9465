//! Second variation at the optimizer: the operator
//! `A = 4 ell^{1-p/2} R ell^{1-p/2}` per angular-momentum channel, its
//! spectrum against the threshold `2 p lambda a / d`, the closed-form
//! identities it satisfies on the dilation and scale directions, and the
//! projected Hessian `H`.

use crate::error::{precondition, LabError, Result};
use crate::optimizer::{derived_constants, OptimizerSolution};
use crate::radial_core::RadialProfile;
use crate::riesz_kernel::channel_kernel;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-channel spectral summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub m: usize,
    pub threshold: f64,
    /// Top eigenvalues of the bare channel operator, descending.
    pub eigenvalues: Vec<f64>,
    /// `threshold - top eigenvalue` on the admissible subspace of the channel.
    pub gap: f64,
    pub identity_residuals: BTreeMap<String, f64>,
}

/// Optimizer plus the profiles entering the second variation.
#[derive(Clone, Debug)]
pub struct HessianContext {
    pub sol: OptimizerSolution,
    /// Number of support nodes (the support is `0..n_support`).
    pub n_support: usize,
    /// `phi = (d/2) sqrt(ell) + x . grad sqrt(ell)`.
    pub phi: RadialProfile,
    /// `ell^{1-p/2}`, the support indicator when `p = 2`.
    pub weight: RadialProfile,
    /// `ell^{p/2}`.
    pub y: Vec<f64>,
    /// `d/dr ell^{p/2}`.
    pub dy: Vec<f64>,
    /// `ell^{(p-1)/2} phi = (d/2) y + (r/p) y'`.
    pub psi: Vec<f64>,
    pub alpha: f64,
    pub threshold: f64,
}

/// Five-point Lagrange derivative with a parity ghost through the origin.
pub fn radial_derivative(nodes: &[f64], values: &[f64], parity: f64) -> Vec<f64> {
    let n = nodes.len();
    let pos = |v: i64| if v >= 0 { nodes[v as usize] } else { -nodes[(-v - 1) as usize] };
    let val = |v: i64| if v >= 0 { values[v as usize] } else { parity * values[(-v - 1) as usize] };
    (0..n as i64)
        .map(|i| {
            let start = (i - 2).min(n as i64 - 5);
            let xs: Vec<f64> = (start..start + 5).map(pos).collect();
            let x = nodes[i as usize];
            let mut d = 0.0;
            for (j, v) in (start..start + 5).enumerate() {
                // Derivative of the j-th Lagrange basis polynomial at x.
                let mut sum = 0.0;
                for k in 0..5 {
                    if k == j {
                        continue;
                    }
                    let mut prod = 1.0 / (xs[j] - xs[k]);
                    for l in 0..5 {
                        if l != j && l != k {
                            prod *= (x - xs[l]) / (xs[j] - xs[l]);
                        }
                    }
                    sum += prod;
                }
                d += sum * val(v);
            }
            d
        })
        .collect()
}

impl HessianContext {
    pub fn new(sol: &OptimizerSolution) -> Result<Self> {
        let params = sol.params;
        params.check_stability_window()?;
        let p = params.p;
        let d = params.dim();
        let grid = &sol.grid;
        let ell = &sol.ell.values;
        let lmax = ell.iter().copied().fold(0.0, f64::max);
        let n_support = ell.iter().rposition(|&v| v > 1e-14 * lmax).map(|i| i + 1).unwrap_or(0);
        if n_support < 8 {
            return precondition("optimizer support covers fewer than 8 nodes; refine the grid");
        }
        // On the support ell = s [Phi - mu]^{1/(p-1)}; differentiate the smooth
        // potential rather than the profile itself.
        let g: Vec<f64> = sol.potential.values.iter().map(|v| v - sol.mu).collect();
        let q = 1.0 / (p - 1.0);
        let gmax = g.iter().copied().fold(0.0, f64::max);
        let (num, den) = (0..n_support)
            .filter(|&i| g[i] > 0.5 * gmax)
            .fold((0.0, 0.0), |(a, b), i| (a + ell[i], b + g[i].powf(q)));
        let s = num / den;
        let dg = radial_derivative(&grid.nodes, &g, 1.0);
        let e = p * q / 2.0;
        let sp = s.powf(p / 2.0);
        let mut y = vec![0.0; grid.len()];
        let mut dy = vec![0.0; grid.len()];
        for i in 0..n_support {
            y[i] = ell[i].powf(p / 2.0);
            if g[i] > 0.0 {
                dy[i] = sp * e * g[i].powf(e - 1.0) * dg[i];
            }
        }
        let psi: Vec<f64> = (0..grid.len()).map(|i| 0.5 * d * y[i] + grid.nodes[i] / p * dy[i]).collect();
        let weight: Vec<f64> = (0..grid.len())
            .map(|i| {
                if i >= n_support {
                    0.0
                } else if p == 2.0 {
                    1.0
                } else {
                    ell[i].powf(1.0 - p / 2.0)
                }
            })
            .collect();
        let phi: Vec<f64> = (0..grid.len())
            .map(|i| {
                if i >= n_support || y[i] <= 0.0 {
                    0.0
                } else {
                    let sq = y[i].powf(1.0 / p);
                    let dsq = y[i].powf(1.0 / p - 1.0) * dy[i] / p;
                    0.5 * d * sq + grid.nodes[i] * dsq
                }
            })
            .collect();
        let c = derived_constants(&params, sol.a);
        Ok(HessianContext {
            sol: sol.clone(),
            n_support,
            phi: RadialProfile::new(grid.clone(), phi)?,
            weight: RadialProfile::new(grid.clone(), weight)?,
            y,
            dy,
            psi,
            alpha: c.alpha,
            threshold: c.threshold,
        })
    }

    fn w(&self) -> &[f64] {
        &self.sol.grid.weights
    }

    fn dot(&self, f: &[f64], g: &[f64]) -> f64 {
        self.w().iter().zip(f.iter().zip(g)).map(|(w, (a, b))| w * a * b).sum()
    }

    fn norm(&self, f: &[f64]) -> f64 {
        self.dot(f, f).sqrt()
    }

    /// `ell^{p/2 - 1} d ell/dr`, the radial part of the translation mode.
    pub fn translation_mode(&self) -> Vec<f64> {
        self.dy.iter().map(|v| 2.0 / self.sol.params.p * v).collect()
    }

    /// `A h` on channel `m` for a grid function `h`.
    pub fn apply_a(&self, m: usize, h: &[f64]) -> Result<Vec<f64>> {
        let k = channel_kernel(&self.sol.params, &self.sol.grid, m)?;
        let om = &self.weight.values;
        let wh: Vec<f64> = h.iter().zip(om).map(|(a, b)| a * b).collect();
        let r = k.apply(&wh);
        Ok(r.iter().zip(om).map(|(a, b)| 4.0 * a * b).collect())
    }

    /// Matrix of `A` on channel `m` in symmetric coordinates `W^{1/2} h`,
    /// restricted to the support.
    pub fn build_channel_a(&self, m: usize) -> Result<DMatrix<f64>> {
        let k = channel_kernel(&self.sol.params, &self.sol.grid, m)?;
        let ns = self.n_support;
        let w = self.w();
        let om = &self.weight.values;
        if om[..ns].iter().all(|&v| v == 0.0) {
            return precondition("empty support indicator");
        }
        let f: Vec<f64> = (0..ns).map(|i| 2.0 * om[i] * w[i].sqrt()).collect();
        let mut a = DMatrix::from_fn(ns, ns, |i, j| f[i] * k.matrix[(i, j)] * f[j]);
        a = 0.5 * (&a + a.transpose());
        Ok(a)
    }

    fn hat(&self, f: &[f64]) -> DVector<f64> {
        let w = self.w();
        DVector::from_iterator(self.n_support, (0..self.n_support).map(|i| w[i].sqrt() * f[i]))
    }

    /// Closed-form identities and their relative weighted-L2 residuals.
    pub fn verify_identities(&self) -> Result<BTreeMap<String, f64>> {
        let params = self.sol.params;
        let (p, l, d) = (params.p, params.lambda, params.dim());
        let a = self.sol.a;
        let mu = self.sol.mu;
        let t = self.threshold;
        let om = &self.weight.values;
        let n = self.y.len();
        let rel = |lhs: &[f64], rhs: &[f64]| -> f64 {
            let diff: Vec<f64> = lhs.iter().zip(rhs).map(|(x, y)| x - y).collect();
            self.norm(&diff) / self.norm(rhs)
        };
        let shifted = |m: usize, h: &[f64]| -> Result<Vec<f64>> {
            Ok(self.apply_a(m, h)?.iter().zip(h).map(|(x, v)| x - t * v).collect())
        };
        let g = l / (d * (p - 1.0));
        let c_sw = [p * l * a * (g - 1.0), 2.0 * l * mu];
        let c_sw2 = [2.0 * p * l * a / d * (1.0 / (p - 1.0) - 1.0), 4.0 * mu];
        let lhs_sw = shifted(0, &self.psi)?;
        let rhs_sw: Vec<f64> = (0..n).map(|i| c_sw[0] * self.y[i] + c_sw[1] * om[i]).collect();
        let lhs_sw2 = shifted(0, &self.y)?;
        let rhs_sw2: Vec<f64> = (0..n).map(|i| c_sw2[0] * self.y[i] + c_sw2[1] * om[i]).collect();
        let f: Vec<f64> = (0..n)
            .map(|i| 2.0 / d * (1.0 / (p - 1.0) - 1.0) * self.psi[i] - (g - 1.0) * self.y[i])
            .collect();
        let tau = mu * (1.0 - l / d);
        let lhs_sw3 = shifted(0, &f)?;
        let rhs_sw3: Vec<f64> = om.iter().map(|v| 4.0 * tau * v).collect();
        let v = self.translation_mode();
        let lhs_m1 = shifted(1, &v)?;
        let m1 = self.norm(&lhs_m1) / (t * self.norm(&v));

        let mut out = BTreeMap::new();
        out.insert("sw".to_string(), rel(&lhs_sw, &rhs_sw));
        out.insert("sw2".to_string(), rel(&lhs_sw2, &rhs_sw2));
        out.insert("sw3".to_string(), rel(&lhs_sw3, &rhs_sw3));
        out.insert("m1_translation".to_string(), m1);
        let ip = self.dot(&self.y, &self.psi);
        out.insert("inner_product".to_string(), ip);
        out.insert("inner_product_error".to_string(), (ip - 0.5 * d * (1.0 - 1.0 / p)).abs());
        let det = c_sw[0] * c_sw2[1] - c_sw[1] * c_sw2[0];
        let mu_th = derived_constants(&params, a).mu;
        let det_th = 4.0 * mu_th * p * l * a * (l / d - 1.0);
        out.insert("determinant".to_string(), det);
        out.insert("determinant_closed_form".to_string(), det_th);
        out.insert("determinant_error".to_string(), (det - det_th).abs() / det_th.abs());
        Ok(out)
    }

    /// Orthonormal basis (symmetric coordinates) of the constraint vectors of
    /// channel `m`: `{ell^{1-p/2}, ell^{(p-1)/2} phi}` for `m = 0`, the
    /// translation mode for `m = 1`, none otherwise.
    fn constraints(&self, m: usize) -> Vec<DVector<f64>> {
        let raw = match m {
            0 => vec![self.hat(&self.weight.values), self.hat(&self.psi)],
            1 => vec![self.hat(&self.translation_mode())],
            _ => vec![],
        };
        orthonormalize(raw)
    }

    /// Top eigenvalue of the channel operator (with the rank-one term in
    /// channel 0) on the orthogonal complement of the constraints.
    pub fn constrained_top(&self, m: usize) -> Result<f64> {
        let mut a = self.build_channel_a(m)?;
        if m == 0 {
            let yh = self.hat(&self.y);
            a -= self.alpha * &yh * yh.transpose();
        }
        let basis = self.constraints(m);
        let pa = project(&a, &basis);
        let eig = symmetric_eigenvalues(pa)?;
        // Constraint directions carry eigenvalue 0; drop that many zeros.
        let mut vals = eig;
        for _ in 0..basis.len() {
            if let Some(pos) = vals.iter().position(|v| v.abs() < 1e-9 * self.threshold) {
                vals.remove(pos);
            }
        }
        Ok(vals.first().copied().unwrap_or(f64::NEG_INFINITY))
    }

    /// Dense spectrum of channel `m` plus the admissible gap.
    pub fn channel_spectrum(&self, m: usize, k: usize) -> Result<SpectrumReport> {
        if k == 0 {
            return precondition("k must be at least 1");
        }
        let vals = symmetric_eigenvalues(self.build_channel_a(m)?)?;
        let top = self.constrained_top(m)?;
        let mut residuals = BTreeMap::new();
        if m == 1 {
            let v = self.translation_mode();
            let av = self.apply_a(1, &v)?;
            let diff: Vec<f64> = av.iter().zip(&v).map(|(x, y)| x - self.threshold * y).collect();
            residuals.insert("translation_eigenpair".into(), self.norm(&diff) / (self.threshold * self.norm(&v)));
            let ev_err = (vals[0] - self.threshold).abs() / self.threshold;
            let align = self.m1_alignment()?;
            residuals.insert("top_eigenvalue_error".into(), ev_err);
            residuals.insert("top_eigenvector_misalignment".into(), 1.0 - align);
            residuals.insert("eigenpair_error".into(), ev_err.max(1.0 - align));
            residuals.insert("second_eigenvalue_gap".into(), (self.threshold - vals[1]) / self.threshold);
        }
        if m == 0 {
            residuals.insert("bs_margin".into(), self.bs_margin_from(&vals));
            for (name, v) in self.verify_identities()? {
                residuals.insert(name, v);
            }
        }
        Ok(SpectrumReport {
            m,
            threshold: self.threshold,
            eigenvalues: vals.into_iter().take(k).collect(),
            gap: self.threshold - top,
            identity_residuals: residuals,
        })
    }

    fn bs_margin_from(&self, vals: &[f64]) -> f64 {
        let scale = self.sol.params.dim() / (2.0 * self.sol.params.p * self.sol.params.lambda * self.sol.a);
        vals.iter().map(|v| (scale * v - 1.0).abs()).fold(f64::INFINITY, f64::min)
    }

    /// `min_i |(d / (2 p lambda a)) lambda_i - 1|` over channel-0 eigenvalues of `A`.
    pub fn bs_triviality_check(&self) -> Result<f64> {
        let vals = symmetric_eigenvalues(self.build_channel_a(0)?)?;
        Ok(self.bs_margin_from(&vals))
    }

    /// `kappa = min_m (threshold - constrained top)` over `m = 0..=m_max`,
    /// with the per-channel tops.
    pub fn gap_estimate(&self, m_max: usize) -> Result<(f64, Vec<f64>)> {
        if m_max < 2 {
            return precondition("m_max must be at least 2");
        }
        let last = if self.sol.params.d == 1 { 1 } else { m_max };
        let tops = (0..=last).map(|m| self.constrained_top(m)).collect::<Result<Vec<_>>>()?;
        let kappa = tops.iter().map(|t| self.threshold - t).fold(f64::INFINITY, f64::min);
        Ok((kappa, tops))
    }

    /// `H = L (A - T - alpha [m=0] |y><y|) L` with `L = ell^{(p-1)/2}`, in
    /// symmetric coordinates on the support.
    pub fn hessian_matrix(&self, m: usize) -> Result<DMatrix<f64>> {
        let mut a = self.build_channel_a(m)?;
        let ns = self.n_support;
        for i in 0..ns {
            a[(i, i)] -= self.threshold;
        }
        if m == 0 {
            let yh = self.hat(&self.y);
            a -= self.alpha * &yh * yh.transpose();
        }
        let p = self.sol.params.p;
        let lfac: Vec<f64> = (0..ns).map(|i| self.sol.ell.values[i].powf(0.5 * (p - 1.0))).collect();
        Ok(DMatrix::from_fn(ns, ns, |i, j| lfac[i] * a[(i, j)] * lfac[j]))
    }

    /// `<g, H g>` on channel `m` after removing the `sqrt(ell)` component
    /// (channel 0); returns the form and the removed coefficient.
    pub fn hessian_form(&self, m: usize, g: &[f64]) -> Result<(f64, f64)> {
        let mut gh = self.hat(g);
        let mut removed = 0.0;
        if m == 0 {
            let sq: Vec<f64> = self.sol.ell.values.iter().map(|v| v.sqrt()).collect();
            let u = self.hat(&sq).normalize();
            removed = u.dot(&gh);
            gh -= removed * &u;
        }
        let h = self.hessian_matrix(m)?;
        Ok(((&h * &gh).dot(&gh), removed))
    }

    /// Largest eigenvalue of `Q H Q` with `Q = 1 - |sqrt ell><sqrt ell|`,
    /// over channels `0..=m_max`.
    pub fn qhq_top(&self, m_max: usize) -> Result<f64> {
        let last = if self.sol.params.d == 1 { 1 } else { m_max };
        let mut top = f64::NEG_INFINITY;
        for m in 0..=last {
            let h = self.hessian_matrix(m)?;
            let mat = if m == 0 {
                let sq: Vec<f64> = self.sol.ell.values.iter().map(|v| v.sqrt()).collect();
                project(&h, &orthonormalize(vec![self.hat(&sq)]))
            } else {
                h
            };
            top = top.max(symmetric_eigenvalues(mat)?[0]);
        }
        Ok(top)
    }
}

fn orthonormalize(vs: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for mut v in vs {
        for _ in 0..2 {
            for u in &out {
                let c = u.dot(&v);
                v -= c * u;
            }
        }
        let n = v.norm();
        if n > 1e-300 {
            out.push(v / n);
        }
    }
    out
}

fn project(a: &DMatrix<f64>, basis: &[DVector<f64>]) -> DMatrix<f64> {
    if basis.is_empty() {
        return a.clone();
    }
    let n = a.nrows();
    let mut p = DMatrix::<f64>::identity(n, n);
    for u in basis {
        p -= u * u.transpose();
    }
    let pa = &p * a * &p;
    0.5 * (&pa + pa.transpose())
}

/// Eigenvalues of a symmetric matrix, descending.
pub fn symmetric_eigenvalues(a: DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = SymmetricEigen::try_new(a, 1e-15, 0)
        .ok_or_else(|| LabError::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(vals)
}

/// Eigenpairs of a symmetric matrix, descending by eigenvalue.
pub fn symmetric_eigenpairs(a: DMatrix<f64>) -> Result<Vec<(f64, DVector<f64>)>> {
    let eig = SymmetricEigen::try_new(a, 1e-15, 0)
        .ok_or_else(|| LabError::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut pairs: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, eig.eigenvectors.column(i).into_owned()))
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    Ok(pairs)
}

impl HessianContext {
    /// Top eigenvector of channel 1 mapped back to grid values, and its
    /// alignment `|<v_top, v>| / (|v_top| |v|)` with the translation mode.
    pub fn m1_alignment(&self) -> Result<f64> {
        let pairs = symmetric_eigenpairs(self.build_channel_a(1)?)?;
        let top = &pairs[0].1;
        let v = self.hat(&self.translation_mode());
        Ok(top.dot(&v).abs() / (top.norm() * v.norm()))
    }
}
