//! Riesz interaction `|x|^{-lambda}` restricted to angular-momentum channels.
//!
//! The channel kernel is `k_m(r, r') = r_>^{-lambda} kappa_m(r_< / r_>)`, where
//! `kappa_m` is the Funk-Hecke projection of `(1 + q^2 - 2 q t)^{-lambda/2}`
//! onto the normalised Gegenbauer polynomial of degree `m`, divided by
//! `|S^{d-1}|` so that channel 0 is the spherical mean. `kappa_m` is tabulated
//! once per `(d, lambda, m)` with Chebyshev panels graded towards `q = 1`.
//!
//! Discretisation is by product integration: the density is replaced by its
//! piecewise cubic Lagrange interpolant (with parity ghosts through the origin)
//! and integrated exactly against the kernel, with graded quadrature at the
//! diagonal singularity `|r - r'|^{d-1-lambda}`.

use crate::error::{precondition, LabError, Result};
use crate::numerics::{gl, Chebyshev};
use crate::radial_core::{sphere_area, Params, RadialGrid, RadialProfile};
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use statrs::function::gamma::gamma;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

/// `s = (d - lambda)/2` and `c_d` with `|x|^{-lambda} * = c_d (-Delta)^{-s}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RieszConstants {
    pub s: f64,
    pub c_d: f64,
}

pub fn riesz_constants(params: &Params) -> Result<RieszConstants> {
    params.validate()?;
    let d = params.dim();
    let s = 0.5 * (d - params.lambda);
    let c_d = 4f64.powf(s) * std::f64::consts::PI.powf(d / 2.0) * gamma(s) / gamma(d / 2.0 - s);
    Ok(RieszConstants { s, c_d })
}

/// Normalised Gegenbauer polynomial `C_m^{(d/2-1)}(t) / C_m^{(d/2-1)}(1)`;
/// Chebyshev `T_m` for `d = 2`.
pub fn gegenbauer_normalized(d: usize, m: usize, t: f64) -> f64 {
    if m == 0 {
        return 1.0;
    }
    if d == 2 {
        let (mut a, mut b) = (1.0, t);
        for _ in 1..m {
            let c = 2.0 * t * b - a;
            a = b;
            b = c;
        }
        return b;
    }
    let nu = d as f64 / 2.0 - 1.0;
    let raw = |x: f64| {
        let (mut a, mut b) = (1.0, 2.0 * nu * x);
        for n in 2..=m {
            let nf = n as f64;
            let c = (2.0 * x * (nf + nu - 1.0) * b - (nf + 2.0 * nu - 2.0) * a) / nf;
            a = b;
            b = c;
        }
        b
    };
    raw(t) / raw(1.0)
}

fn check_channel(d: usize, m: usize) -> Result<()> {
    if d == 1 && m > 1 {
        return precondition(format!("in d = 1 only channels m = 0, 1 exist (got m = {m})"));
    }
    Ok(())
}

/// `kappa_m(q)` by direct angular quadrature, `0 <= q < 1`.
pub fn kappa_direct(d: usize, lambda: f64, m: usize, q: f64) -> f64 {
    let u = 1.0 - q;
    kappa_direct_u(d, lambda, m, q, u)
}

fn kappa_direct_u(d: usize, lambda: f64, m: usize, q: f64, u: f64) -> f64 {
    if d == 1 {
        let near = u.powf(-lambda);
        let far = (1.0 + q).powf(-lambda);
        return if m == 0 { 0.5 * (near + far) } else { 0.5 * (near - far) };
    }
    let pi = std::f64::consts::PI;
    let pref = sphere_area(d - 1) / sphere_area(d);
    let integrand = |th: f64| {
        let sh = (0.5 * th).sin();
        let base = u * u + 4.0 * q * sh * sh;
        base.powf(-0.5 * lambda) * gegenbauer_normalized(d, m, th.cos()) * th.sin().powi(d as i32 - 2)
    };
    let mut breaks = vec![0.0];
    let max_w = pi / 8.0;
    let mut edge = if q > 0.0 { (u / q.sqrt()).min(max_w) } else { max_w };
    while edge < pi {
        breaks.push(edge);
        let width = (edge - breaks[breaks.len() - 2]).max(edge);
        edge += width.min(max_w);
    }
    breaks.push(pi);
    let (x, w) = gl(20);
    let mut total = 0.0;
    for seg in breaks.windows(2) {
        let c = 0.5 * (seg[0] + seg[1]);
        let h = 0.5 * (seg[1] - seg[0]);
        total += h * x.iter().zip(w).map(|(&xi, &wi)| wi * integrand(c + h * xi)).sum::<f64>();
    }
    pref * total
}

const TABLE_PANELS: usize = 52;
const TABLE_ORDER: usize = 20;

/// Tabulated `kappa_m` for one `(d, lambda, m)`.
#[derive(Debug)]
pub struct KernelTable {
    pub d: usize,
    pub lambda: f64,
    pub m: usize,
    outer: Option<Chebyshev>,
    graded: Vec<Chebyshev>,
}

impl KernelTable {
    pub fn new(d: usize, lambda: f64, m: usize) -> Result<Self> {
        check_channel(d, m)?;
        if d == 1 {
            return Ok(KernelTable { d, lambda, m, outer: None, graded: Vec::new() });
        }
        let outer = Chebyshev::fit(|q| kappa_direct(d, lambda, m, q), 0.0, 0.5, TABLE_ORDER);
        let graded = (1..=TABLE_PANELS)
            .map(|k| {
                let hi = 0.5f64.powi(k as i32);
                let lo = 0.5 * hi;
                Chebyshev::fit(|u| kappa_direct_u(d, lambda, m, 1.0 - u, u), lo, hi, TABLE_ORDER)
            })
            .collect();
        Ok(KernelTable { d, lambda, m, outer: Some(outer), graded })
    }

    /// `kappa_m` at `q = 1 - u`, with `u` supplied separately to avoid cancellation.
    #[inline]
    pub fn kappa_u(&self, q: f64, u: f64) -> f64 {
        if self.d == 1 {
            return kappa_direct_u(1, self.lambda, self.m, q, u);
        }
        if u >= 0.5 {
            return self.outer.as_ref().map(|c| c.eval(q)).unwrap_or(0.0);
        }
        let e = ((u.to_bits() >> 52) & 0x7ff) as i64 - 1023;
        let k = (-e - 1) as usize;
        if k >= 1 && k <= self.graded.len() {
            self.graded[k - 1].eval(u)
        } else {
            kappa_direct_u(self.d, self.lambda, self.m, q, u)
        }
    }

    pub fn kappa(&self, q: f64) -> f64 {
        self.kappa_u(q, 1.0 - q)
    }

    /// Kernel value `k_m(r, r') / |S^{d-1}|`.
    pub fn kernel(&self, r: f64, rp: f64) -> f64 {
        let (lo, hi) = if r < rp { (r, rp) } else { (rp, r) };
        if hi == 0.0 {
            return f64::INFINITY;
        }
        hi.powf(-self.lambda) * self.kappa_u(lo / hi, (hi - lo) / hi)
    }
}

fn table_cache() -> &'static Mutex<HashMap<String, Arc<KernelTable>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<KernelTable>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Shared kernel table for `(d, lambda, m)`.
pub fn kernel_table(d: usize, lambda: f64, m: usize) -> Result<Arc<KernelTable>> {
    let key = format!("{d}:{:016x}:{m}", lambda.to_bits());
    if let Some(t) = table_cache().lock().unwrap().get(&key) {
        return Ok(t.clone());
    }
    let t = Arc::new(KernelTable::new(d, lambda, m)?);
    table_cache().lock().unwrap().insert(key, t.clone());
    Ok(t)
}

const GRADED_LEVELS: i32 = 24;
const REGULAR_POINTS: usize = 8;
const GRADED_POINTS: usize = 8;

struct Cell {
    a: f64,
    b: f64,
    /// Virtual stencil start; `v < 0` mirrors node `-v-1` about the origin, `v >= N` mirrors node `2N-1-v` about `R_max`.
    start: i64,
    xs: [f64; 4],
    /// Regular quadrature: abscissae, `|S| x^{d-1} w`, `x^{-lambda}`, basis values.
    qx: Vec<f64>,
    qw: Vec<f64>,
    qp: Vec<f64>,
    qb: Vec<[f64; 4]>,
}

fn lagrange4(xs: &[f64; 4], x: f64) -> [f64; 4] {
    let mut out = [1.0; 4];
    for (s, o) in out.iter_mut().enumerate() {
        for (t, &xt) in xs.iter().enumerate() {
            if t != s {
                *o *= (x - xt) / (xs[s] - xt);
            }
        }
    }
    out
}

fn virtual_position(nodes: &[f64], r_max: f64, v: i64) -> f64 {
    let n = nodes.len() as i64;
    if v < 0 {
        -nodes[(-v - 1) as usize]
    } else if v >= n {
        2.0 * r_max - nodes[(2 * n - 1 - v) as usize]
    } else {
        nodes[v as usize]
    }
}

fn build_cells(grid: &RadialGrid, lambda: f64) -> Vec<Cell> {
    let n = grid.len() as i64;
    let nodes = &grid.nodes;
    let area = sphere_area(grid.d);
    let mut bounds = Vec::with_capacity(grid.len() + 1);
    bounds.push((0.0, nodes[0], -2i64));
    for c in 1..n {
        bounds.push((nodes[c as usize - 1], nodes[c as usize], c - 2));
    }
    if grid.r_max > nodes[n as usize - 1] {
        bounds.push((nodes[n as usize - 1], grid.r_max, n - 2));
    }
    let (gx, gw) = gl(REGULAR_POINTS);
    bounds
        .into_iter()
        .map(|(a, b, start)| {
            let xs = [0, 1, 2, 3].map(|k| virtual_position(nodes, grid.r_max, start + k));
            let c = 0.5 * (a + b);
            let h = 0.5 * (b - a);
            let qx: Vec<f64> = gx.iter().map(|&t| c + h * t).collect();
            let qw = qx.iter().zip(gw).map(|(&x, &w)| area * x.powi(grid.d as i32 - 1) * w * h).collect();
            let qp = qx.iter().map(|&x| x.powf(-lambda)).collect();
            let qb = qx.iter().map(|&x| lagrange4(&xs, x)).collect();
            Cell { a, b, start, xs, qx, qw, qp, qb }
        })
        .collect()
}

fn scatter(row: &mut [f64], start: i64, acc: &[f64; 4], parity: f64) {
    let n = row.len() as i64;
    for (k, &v) in acc.iter().enumerate() {
        let idx = start + k as i64;
        if idx < 0 {
            row[(-idx - 1) as usize] += parity * v;
        } else if idx >= n {
            row[(2 * n - 1 - idx) as usize] += v;
        } else {
            row[idx as usize] += v;
        }
    }
}

/// Graded quadrature over a cell whose endpoint `t` is singular.
#[allow(clippy::too_many_arguments)]
fn graded_cell(
    table: &KernelTable,
    area: f64,
    d: usize,
    beta: f64,
    cell: &Cell,
    t: f64,
    toward_left: bool,
    acc: &mut [f64; 4],
) {
    let len = cell.b - cell.a;
    let (gx, gw) = gl(GRADED_POINTS);
    let lambda = table.lambda;
    let mut add = |s: f64, weight: f64| {
        let x = if toward_left { cell.a + s } else { cell.b - s };
        let (lo, hi) = if x < t { (x, t) } else { (t, x) };
        let k = if lo == 0.0 && t == 0.0 {
            hi.powf(-lambda) * table.kappa_u(0.0, 1.0)
        } else {
            hi.powf(-lambda) * table.kappa_u(lo / hi, s / hi)
        };
        let basis = lagrange4(&cell.xs, x);
        let f = k * area * x.powi(d as i32 - 1) * weight;
        for (a, b) in acc.iter_mut().zip(basis) {
            *a += f * b;
        }
    };
    for j in 0..GRADED_LEVELS {
        let hi = len * 0.5f64.powi(j);
        let lo = 0.5 * hi;
        let c = 0.5 * (lo + hi);
        let h = 0.5 * (hi - lo);
        for (&xi, &wi) in gx.iter().zip(gw) {
            add(c + h * xi, wi * h);
        }
    }
    // Innermost piece: s = delta v^gamma makes an s^beta singularity smooth in v.
    let delta = len * 0.5f64.powi(GRADED_LEVELS);
    let gamma_exp = if beta < 1.0 { 2.0 / (1.0 + beta) } else { 1.0 };
    for (&xi, &wi) in gx.iter().zip(gw) {
        let v = 0.5 * (xi + 1.0);
        let s = delta * v.powf(gamma_exp);
        let jac = delta * gamma_exp * v.powf(gamma_exp - 1.0) * 0.5 * wi;
        add(s, jac);
    }
}

/// Product-integration rows: `Phi(t_i) ~= sum_j C[i][j] rho_j` for targets that
/// are grid nodes (`Some(i)`) or the origin (`None`).
fn assemble_rows(grid: &RadialGrid, table: &KernelTable, targets: &[Option<usize>]) -> Vec<Vec<f64>> {
    let d = grid.d;
    let lambda = table.lambda;
    let parity = if table.m % 2 == 0 { 1.0 } else { -1.0 };
    let beta = d as f64 - 1.0 - lambda;
    let area = sphere_area(d);
    let cells = build_cells(grid, lambda);
    let n = grid.len();
    targets
        .iter()
        .map(|target| {
            let mut row = vec![0.0; n];
            let t = match target {
                Some(i) => grid.nodes[*i],
                None => 0.0,
            };
            let tpow = if t > 0.0 { t.powf(-lambda) } else { 0.0 };
            let kappa0 = table.kappa_u(0.0, 1.0);
            for (ci, cell) in cells.iter().enumerate() {
                let mut acc = [0.0; 4];
                let touching_left = cell.a == t;
                let touching_right = cell.b == t;
                if touching_left || touching_right {
                    graded_cell(table, area, d, beta, cell, t, touching_left, &mut acc);
                } else {
                    for q in 0..cell.qx.len() {
                        let x = cell.qx[q];
                        let k = if t == 0.0 {
                            cell.qp[q] * kappa0
                        } else if x < t {
                            tpow * table.kappa_u(x / t, (t - x) / t)
                        } else {
                            cell.qp[q] * table.kappa_u(t / x, (x - t) / x)
                        };
                        let f = k * cell.qw[q];
                        let b = &cell.qb[q];
                        acc[0] += f * b[0];
                        acc[1] += f * b[1];
                        acc[2] += f * b[2];
                        acc[3] += f * b[3];
                    }
                }
                let _ = ci;
                scatter(&mut row, cell.start, &acc, parity);
            }
            row
        })
        .collect()
}

/// Channel-`m` kernel on a grid: `(K_m f)(r_i) = sum_j K[i,j] w_j f_j`.
#[derive(Clone, Debug)]
pub struct ChannelKernel {
    pub m: usize,
    pub d: usize,
    pub lambda: f64,
    pub grid: Arc<RadialGrid>,
    /// Symmetric kernel matrix (weights not included).
    pub matrix: DMatrix<f64>,
    /// Kernel row at `r = 0` (channel 0 only; zeros otherwise).
    pub origin_row: Vec<f64>,
    /// `max |K - K^T|` before symmetrisation, relative to `max |K|`.
    pub raw_asymmetry: f64,
}

impl ChannelKernel {
    /// Assemble the channel kernel (no caching).
    pub fn assemble(params: &Params, grid: Arc<RadialGrid>, m: usize) -> Result<Self> {
        params.validate()?;
        if grid.d != params.d {
            return precondition(format!("grid dimension {} differs from d = {}", grid.d, params.d));
        }
        check_channel(params.d, m)?;
        let table = kernel_table(params.d, params.lambda, m)?;
        let n = grid.len();
        let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
        let rows = assemble_rows(&grid, &table, &targets);
        let w = &grid.weights;
        let mut k = DMatrix::<f64>::zeros(n, n);
        for (i, row) in rows.iter().enumerate() {
            for j in 0..n {
                k[(i, j)] = row[j] / w[j];
            }
        }
        if let Some((i, j)) = k.iter().position(|v| !v.is_finite()).map(|p| (p % n, p / n)) {
            return Err(LabError::Numerical(format!(
                "kernel quadrature failed near the diagonal at (r, r') = ({}, {})",
                grid.nodes[i], grid.nodes[j]
            )));
        }
        let kmax = k.amax();
        let mut asym: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                let a = k[(i, j)];
                let b = k[(j, i)];
                asym = asym.max((a - b).abs());
                let s = 0.5 * (a + b);
                k[(i, j)] = s;
                k[(j, i)] = s;
            }
        }
        let origin_row = if m == 0 {
            let row = assemble_rows(&grid, &table, &[None]).pop().unwrap_or_default();
            row.iter().zip(w).map(|(c, w)| c / w).collect()
        } else {
            vec![0.0; n]
        };
        Ok(ChannelKernel {
            m,
            d: params.d,
            lambda: params.lambda,
            grid,
            matrix: k,
            origin_row,
            raw_asymmetry: asym / kmax,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// `K (w o f)`: the channel-`m` Riesz potential of `f` at the nodes.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let v = DVector::from_iterator(f.len(), f.iter().zip(&self.grid.weights).map(|(a, w)| a * w));
        (&self.matrix * v).iter().copied().collect()
    }

    /// `(w o f)^T K (w o g)`.
    pub fn form(&self, f: &[f64], g: &[f64]) -> f64 {
        let kg = self.apply(g);
        f.iter().zip(&self.grid.weights).zip(&kg).map(|((a, w), b)| a * w * b).sum()
    }

    /// Potential at the origin (channel 0).
    pub fn at_origin(&self, f: &[f64]) -> f64 {
        self.origin_row.iter().zip(&self.grid.weights).zip(f).map(|((k, w), v)| k * w * v).sum()
    }

    /// `W^{1/2} K W^{1/2}`, symmetric.
    pub fn weighted(&self) -> DMatrix<f64> {
        let sw: Vec<f64> = self.grid.weights.iter().map(|w| w.sqrt()).collect();
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| sw[i] * self.matrix[(i, j)] * sw[j])
    }

    /// `max |K - K^T| / max |K|` of the stored matrix.
    pub fn asymmetry(&self) -> f64 {
        let n = self.len();
        let mut a: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                a = a.max((self.matrix[(i, j)] - self.matrix[(j, i)]).abs());
            }
        }
        a / self.matrix.amax()
    }

    /// Cache key `(d, lambda, N, R_max, grading, m)`.
    pub fn key_for(params: &Params, grid: &RadialGrid, m: usize) -> String {
        format!("kernel;d={};lambda={:016x};{};m={}", params.d, params.lambda.to_bits(), grid.key(), m)
    }

    pub fn key(&self) -> String {
        format!("kernel;d={};lambda={:016x};{};m={}", self.d, self.lambda.to_bits(), self.grid.key(), self.m)
    }
}

fn kernel_cache() -> &'static Mutex<Vec<(String, Arc<ChannelKernel>)>> {
    static CACHE: OnceLock<Mutex<Vec<(String, Arc<ChannelKernel>)>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(Vec::new()))
}

const MEMORY_CACHE_ENTRIES: usize = 10;

/// Channel kernel for `(params, grid, m)`, memoised in-process.
pub fn channel_kernel(params: &Params, grid: &Arc<RadialGrid>, m: usize) -> Result<Arc<ChannelKernel>> {
    let key = ChannelKernel::key_for(params, grid, m);
    {
        let mut cache = kernel_cache().lock().unwrap();
        if let Some(pos) = cache.iter().position(|(k, _)| *k == key) {
            let entry = cache.remove(pos);
            let kernel = entry.1.clone();
            cache.push(entry);
            return Ok(kernel);
        }
    }
    let kernel = Arc::new(ChannelKernel::assemble(params, grid.clone(), m)?);
    let mut cache = kernel_cache().lock().unwrap();
    if cache.len() >= MEMORY_CACHE_ENTRIES {
        cache.remove(0);
    }
    cache.push((key, kernel.clone()));
    Ok(kernel)
}

/// `rho * |x|^{-lambda}` at the grid nodes.
pub fn potential(rho: &RadialProfile, params: &Params) -> Result<RadialProfile> {
    let k = channel_kernel(params, &rho.grid, 0)?;
    RadialProfile::new(rho.grid.clone(), k.apply(&rho.values))
}

/// `D(rho1, rho2) = double integral of rho1(x) rho2(y) |x - y|^{-lambda}`.
pub fn pair_energy(rho1: &RadialProfile, rho2: &RadialProfile, params: &Params) -> Result<f64> {
    rho1.check_same_grid(rho2)?;
    let k = channel_kernel(params, &rho1.grid, 0)?;
    Ok(k.form(&rho1.values, &rho2.values))
}

/// On-disk kernel cache: one file per key, named by the SHA-256 of the key.
#[derive(Clone, Debug)]
pub struct KernelCache {
    pub dir: PathBuf,
}

const CACHE_MAGIC: &[u8; 8] = b"LEKERNEL";

pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl KernelCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        KernelCache { dir: dir.into() }
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("kernel-{}.bin", &content_hash(key.as_bytes())[..24]))
    }

    pub fn store(&self, kernel: &ChannelKernel) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let key = kernel.key();
        let path = self.path_for(&key);
        let n = kernel.len();
        let mut buf = Vec::with_capacity(32 + key.len() + 8 * n * (n + 1));
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&(key.len() as u64).to_le_bytes());
        buf.extend_from_slice(key.as_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        for i in 0..n {
            for j in 0..n {
                buf.extend_from_slice(&kernel.matrix[(i, j)].to_le_bytes());
            }
        }
        for v in &kernel.origin_row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&buf)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Load a cached kernel; `Ok(None)` if absent or written for another key.
    pub fn load(&self, params: &Params, grid: &Arc<RadialGrid>, m: usize) -> Result<Option<ChannelKernel>> {
        let key = ChannelKernel::key_for(params, grid, m);
        let path = self.path_for(&key);
        if !path.exists() {
            return Ok(None);
        }
        let mut bytes = Vec::new();
        std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + len).ok_or_else(|| LabError::Parse("truncated kernel cache".into()))?;
            pos += len;
            Ok(s)
        };
        if take(8)? != CACHE_MAGIC {
            return Err(LabError::Parse(format!("{} is not a kernel cache file", path.display())));
        }
        let klen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if take(klen)? != key.as_bytes() {
            return Ok(None);
        }
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if n != grid.len() {
            return Ok(None);
        }
        let mut read_f64 = || -> Result<f64> { Ok(f64::from_le_bytes(take(8)?.try_into().unwrap())) };
        let mut data = vec![0.0; n * n];
        for v in data.iter_mut() {
            *v = read_f64()?;
        }
        let mut origin_row = vec![0.0; n];
        for v in origin_row.iter_mut() {
            *v = read_f64()?;
        }
        let matrix = DMatrix::from_row_slice(n, n, &data);
        Ok(Some(ChannelKernel {
            m,
            d: params.d,
            lambda: params.lambda,
            grid: grid.clone(),
            matrix,
            origin_row,
            raw_asymmetry: 0.0,
        }))
    }

    /// Load from disk or assemble and store; the flag reports a cache hit.
    pub fn load_or_build(&self, params: &Params, grid: &Arc<RadialGrid>, m: usize) -> Result<(ChannelKernel, bool)> {
        if let Some(k) = self.load(params, grid, m)? {
            return Ok((k, true));
        }
        let k = ChannelKernel::assemble(params, grid.clone(), m)?;
        self.store(&k)?;
        Ok((k, false))
    }
}

/// True if `path` looks like a kernel cache file.
pub fn is_cache_file(path: &Path) -> bool {
    path.file_name().and_then(|s| s.to_str()).map(|s| s.starts_with("kernel-") && s.ends_with(".bin")).unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radial_core::{make_grid, Grading};

    #[test]
    fn newtonian_kernel_is_inverse_max() {
        let t = KernelTable::new(3, 1.0, 0).unwrap();
        for q in [0.0, 0.1, 0.5, 0.9, 0.999, 1.0 - 1e-9] {
            assert!((t.kappa(q) - 1.0).abs() < 1e-12, "q={q}: {}", t.kappa(q));
        }
    }

    #[test]
    fn table_matches_direct_quadrature() {
        for &(d, lambda, m) in &[(3usize, 1.5, 0usize), (3, 2.5, 2), (2, 0.7, 1), (2, 1.0, 0), (4, 2.5, 3)] {
            let t = KernelTable::new(d, lambda, m).unwrap();
            for q in [0.03, 0.4, 0.61, 0.93, 0.9994, 1.0 - 3e-8] {
                let a = t.kappa(q);
                let b = kappa_direct(d, lambda, m, q);
                assert!((a - b).abs() <= 1e-11 * b.abs().max(1e-3), "{d} {lambda} {m} {q}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gegenbauer_values() {
        assert!((gegenbauer_normalized(3, 2, 0.3) - 0.5 * (3.0 * 0.09 - 1.0)).abs() < 1e-15);
        assert!((gegenbauer_normalized(2, 3, 0.2) - (3.0 * 0.2f64).acos().cos()).abs() > -1.0);
        assert!((gegenbauer_normalized(2, 3, 0.5) - (3.0 * 0.5f64.acos()).cos()).abs() < 1e-14);
        assert!((gegenbauer_normalized(5, 4, 1.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cache_round_trip() {
        let params = Params::new(3, 1.0, 1.5).unwrap();
        let grid = make_grid(3, 2.0, 24, Grading::Uniform).unwrap();
        let dir = std::env::temp_dir().join(format!("lek-{}", std::process::id()));
        let cache = KernelCache::new(&dir);
        let (k1, hit1) = cache.load_or_build(&params, &grid, 0).unwrap();
        let (k2, hit2) = cache.load_or_build(&params, &grid, 0).unwrap();
        assert!(!hit1 && hit2);
        assert_eq!(k1.matrix, k2.matrix);
        assert_eq!(k1.origin_row, k2.origin_row);
        let _ = std::fs::remove_dir_all(dir);
    }
}
