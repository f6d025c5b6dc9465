//! Batch driver: flat `key=value` configuration with flag overrides, the six
//! subcommands, report files, the output manifest and the optimizer cache.

use crate::error::{LabError, Result};
use crate::free_energy_flow::{gaussian, scale_to_lchi_on, theory_values, FlowOperator, Regime, StopSpec, TheoryValues};
use crate::hessian_spec::{HessianContext, SpectrumReport};
use crate::optimizer::{auto_r_max, derived_constants, solve_optimizer, OptimizerSolution, SolveOptions};
use crate::radial_core::{make_grid, Grading, Params, RadialProfile};
use crate::riesz_kernel::{content_hash, pair_energy};
use crate::scattering_diag::{
    default_t_grid, fractional_hamiltonian, local_hamiltonian, monotonicity_report, scattering_problem_from_with,
    solve_scattering, ScatteringReport,
};
use crate::stability_lab::{dilation_direction, quotient_curve, random_direction, reports_to_csv, PerturbationSpec, DEFAULT_EPSILONS};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "lane-emden", version, about = "Optimizers, spectra, stability, flows and scattering for the Lane-Emden interaction inequality")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Space dimension.
    #[arg(long, global = true)]
    pub d: Option<usize>,
    /// Riesz exponent, 0 < lambda < d.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Diffusion exponent.
    #[arg(long, global = true)]
    pub p: Option<f64>,
    /// Interaction strength of the free energy.
    #[arg(long, global = true)]
    pub chi: Option<f64>,
    /// Total mass for the flow and the theory values.
    #[arg(long, global = true)]
    pub mass: Option<f64>,
    /// Domain radius of the optimizer grid (default 1.5 times the support radius).
    #[arg(long, global = true)]
    pub rmax: Option<f64>,
    /// Number of radial cells.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Flat key=value configuration file; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of the perturbation directions.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Grid grading, uniform or geometric.
    #[arg(long, global = true)]
    pub grading: Option<String>,
    /// Optimizer residual tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Optimizer cache directory (default <out>/cache).
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Sharp constant and all derived constants as JSON.
    Constants,
    /// Solve for the optimizer and write its profile.
    Optimize,
    /// Channel spectra, identities, gap and Birman-Schwinger margin.
    Spectrum {
        #[arg(long)]
        m_max: Option<usize>,
        /// Eigenvalues reported per channel.
        #[arg(long)]
        eigs: Option<usize>,
    },
    /// Deficit quotients along seeded directions and the dilation mode.
    Stability {
        #[arg(long)]
        directions: Option<usize>,
        /// Comma-separated amplitudes.
        #[arg(long)]
        epsilons: Option<String>,
    },
    /// Aggregation-diffusion flow from a Gaussian.
    Flow {
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Domain radius of the flow grid.
        #[arg(long)]
        flow_rmax: Option<f64>,
        #[arg(long)]
        dt0: Option<f64>,
        /// Relative energy change over the stop window.
        #[arg(long)]
        stop_tol: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Zero-energy scattering solution and its Hamiltonian.
    Scattering {
        #[arg(long)]
        t_slices: Option<usize>,
        #[arg(long)]
        r_points: Option<usize>,
        /// Accept a potential that is not nondecreasing (nothing asserted).
        #[arg(long)]
        allow_nonmonotone: bool,
    },
}

const KEYS: &[&str] = &[
    "d", "lambda", "p", "chi", "mass", "rmax", "n", "out", "seed", "grading", "tol", "cache", "m_max", "eigs", "directions",
    "epsilons", "sigma", "t_end", "max_steps", "flow_rmax", "dt0", "stop_tol", "window", "t_slices", "r_points",
    "allow_nonmonotone",
];

/// Merged configuration: file values overlaid by flags.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Precondition(format!("config line {}: expected key=value", i + 1)))?;
            let key = k.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                return Err(LabError::Precondition(format!("config line {}: unknown key '{}'", i + 1, k.trim())));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Settings { values })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| LabError::Precondition(format!("cannot parse {key} = '{v}'"))),
        }
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }
}

macro_rules! overlay {
    ($s:expr, $($key:literal => $val:expr),* $(,)?) => {
        {
            $( if let Some(v) = &$val { $s.set($key, v); } )*
        }
    };
}

impl Cli {
    /// Config file (if any) overlaid by every flag that was given.
    pub fn settings(&self) -> Result<Settings> {
        let mut s = match &self.common.config {
            Some(path) => Settings::parse(&fs::read_to_string(path)?)?,
            None => Settings::default(),
        };
        let c = &self.common;
        overlay!(s, "d" => c.d, "lambda" => c.lambda, "p" => c.p, "chi" => c.chi, "mass" => c.mass, "rmax" => c.rmax,
            "n" => c.n, "seed" => c.seed, "grading" => c.grading, "tol" => c.tol);
        if let Some(v) = &c.out {
            s.set("out", v.display());
        }
        if let Some(v) = &c.cache {
            s.set("cache", v.display());
        }
        match &self.command {
            Command::Spectrum { m_max, eigs } => overlay!(s, "m_max" => m_max, "eigs" => eigs),
            Command::Stability { directions, epsilons } => overlay!(s, "directions" => directions, "epsilons" => epsilons),
            Command::Flow { sigma, t_end, max_steps, flow_rmax, dt0, stop_tol, window } => overlay!(s,
                "sigma" => sigma, "t_end" => t_end, "max_steps" => max_steps, "flow_rmax" => flow_rmax, "dt0" => dt0,
                "stop_tol" => stop_tol, "window" => window),
            Command::Scattering { t_slices, r_points, allow_nonmonotone } => {
                overlay!(s, "t_slices" => t_slices, "r_points" => r_points);
                if *allow_nonmonotone {
                    s.set("allow_nonmonotone", true);
                }
            }
            Command::Constants | Command::Optimize => {}
        }
        Ok(s)
    }
}

/// Parameters, grid and solver options shared by every subcommand.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub params: Params,
    pub r_max: Option<f64>,
    pub n: usize,
    pub grading: Grading,
    pub solve: SolveOptions,
    pub out: PathBuf,
    pub cache: PathBuf,
    pub seed: u64,
    pub settings: Settings,
}

impl RunConfig {
    pub fn from_settings(settings: Settings) -> Result<Self> {
        let d = settings.or("d", 3usize)?;
        let params = Params::new(d, settings.or("lambda", 1.0)?, settings.or("p", 4.0 / 3.0)?)?
            .with_chi(settings.or("chi", 1.0)?)?
            .with_mass(settings.or("mass", 1.0)?)?;
        let n = settings.or("n", 400usize)?;
        if n < 16 {
            return Err(LabError::Precondition(format!("n = {n} must be at least 16")));
        }
        let r_max: Option<f64> = settings.get("rmax")?;
        if let Some(r) = r_max {
            if !(r > 0.0 && r.is_finite()) {
                return Err(LabError::Precondition(format!("rmax = {r} must be positive")));
            }
        }
        let grading: Grading = settings.or("grading", "uniform".to_string())?.parse().map_err(|e: LabError| LabError::Precondition(e.to_string()))?;
        let solve = SolveOptions { tol: settings.or("tol", SolveOptions::default().tol)?, ..SolveOptions::default() };
        solve.validate()?;
        let out: PathBuf = settings.or("out", "out".to_string())?.into();
        let cache = settings.get::<String>("cache")?.map(PathBuf::from).unwrap_or_else(|| out.join("cache"));
        let seed = settings.or("seed", 0u64)?;
        Ok(RunConfig { params, r_max, n, grading, solve, out, cache, seed, settings })
    }
}

/// Advisory lock on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(LabError::Io(std::io::Error::new(
                e.kind(),
                format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display()),
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

/// Hash every regular file directly under `dir` except the lock and the manifest.
pub fn build_manifest(dir: &Path) -> Result<Manifest> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !entry.file_type()?.is_file() || name == "manifest.json" || name == ".lock" {
            continue;
        }
        files.push(ManifestEntry { sha256: content_hash(&fs::read(entry.path())?), path: name });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest { files })
}

/// Messages emitted during a run (also echoed to stderr).
#[derive(Debug, Default)]
pub struct Session {
    pub log: Vec<String>,
    pub written: Vec<PathBuf>,
}

impl Session {
    fn note(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        eprintln!("{msg}");
        self.log.push(msg);
    }

    fn write(&mut self, path: PathBuf, contents: &str) -> Result<()> {
        fs::write(&path, contents)?;
        self.written.push(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        self.write(path, &(serde_json::to_string_pretty(value)? + "\n"))
    }
}

/// Cache key of an optimizer solve.
pub fn cache_key(cfg: &RunConfig, r_max: f64) -> String {
    let p = &cfg.params;
    content_hash(
        format!(
            "d={};lambda={:?};p={:?};n={};rmax={:?};grading={};tol={:?}",
            p.d,
            p.lambda,
            p.p,
            cfg.n,
            r_max,
            cfg.grading.as_str(),
            cfg.solve.tol
        )
        .as_bytes(),
    )
}

/// Cached optimizer; fresh solves are written to the cache and read back so
/// that both paths yield identical downstream numbers.
pub fn cached_optimizer(cfg: &RunConfig, session: &mut Session) -> Result<OptimizerSolution> {
    let r_max = match cfg.r_max {
        Some(r) => r,
        None => auto_r_max(&cfg.params, 1.5, &cfg.solve)?,
    };
    let key = cache_key(cfg, r_max);
    let (chi, mass) = (cfg.params.chi, cfg.params.mass);
    if cfg.cache.join(format!("{key}.json")).exists() {
        session.note(format!("cache hit: optimizer {key}"));
        return OptimizerSolution::read_bundle(&cfg.cache, &key, chi, mass);
    }
    session.note(format!("cache miss: optimizer {key}"));
    let grid = make_grid(cfg.params.d, r_max, cfg.n, cfg.grading)?;
    let sol = solve_optimizer(&cfg.params, &grid, &cfg.solve)?;
    sol.write_bundle(&cfg.cache, &key)?;
    OptimizerSolution::read_bundle(&cfg.cache, &key, chi, mass)
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Serialize)]
struct ConstantsReport {
    a: f64,
    mu: f64,
    p_c: f64,
    s: f64,
    alpha: f64,
    tau: f64,
    threshold: f64,
    #[serde(rename = "F_M")]
    f_m: Option<f64>,
    #[serde(rename = "M_c")]
    m_c: Option<f64>,
    #[serde(rename = "P_M")]
    p_m: Option<f64>,
    regime: Regime,
}

fn cmd_constants(cfg: &RunConfig, session: &mut Session) -> Result<()> {
    let sol = cached_optimizer(cfg, session)?;
    let c = derived_constants(&cfg.params, sol.a);
    let tv = theory_values(&cfg.params, sol.a)?;
    let report = ConstantsReport {
        a: sol.a,
        mu: c.mu,
        p_c: c.p_c,
        s: c.s,
        alpha: c.alpha,
        tau: c.tau,
        threshold: c.threshold,
        f_m: finite(tv.f_m),
        m_c: tv.m_c,
        p_m: tv.p_m,
        regime: tv.regime,
    };
    session.write_json(cfg.out.join("constants.json"), &report)
}

#[derive(Serialize)]
struct OptimizeReport {
    d: usize,
    lambda: f64,
    p: f64,
    a: f64,
    mu: f64,
    support_radius: f64,
    support_edge: f64,
    residual: f64,
    mu_consistency: f64,
    energy_consistency: f64,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "R_max")]
    r_max: f64,
}

fn cmd_optimize(cfg: &RunConfig, session: &mut Session) -> Result<()> {
    let sol = cached_optimizer(cfg, session)?;
    let dll = pair_energy(&sol.ell, &sol.ell, &sol.params)?;
    let report = OptimizeReport {
        d: sol.params.d,
        lambda: sol.params.lambda,
        p: sol.params.p,
        a: sol.a,
        mu: sol.mu,
        support_radius: sol.support_radius,
        support_edge: sol.support_edge(),
        residual: sol.residual,
        mu_consistency: sol.mu_consistency(),
        energy_consistency: (sol.a - dll).abs() / sol.a,
        n: sol.grid.len(),
        r_max: sol.grid.r_max,
    };
    session.write(cfg.out.join("optimizer.csv"), &sol.ell.to_csv())?;
    session.write(cfg.out.join("potential.csv"), &sol.potential.to_csv())?;
    session.write_json(cfg.out.join("optimizer.json"), &report)
}

#[derive(Serialize)]
struct SpectrumSummary {
    a: f64,
    threshold: f64,
    kappa: f64,
    channel_tops: Vec<f64>,
    bs_margin: f64,
    qhq_top: f64,
    qhq_top_over_a: f64,
    channels: Vec<SpectrumReport>,
}

fn cmd_spectrum(cfg: &RunConfig, session: &mut Session) -> Result<()> {
    let m_max = cfg.settings.or("m_max", 3usize)?;
    let eigs = cfg.settings.or("eigs", 6usize)?;
    let sol = cached_optimizer(cfg, session)?;
    let ctx = HessianContext::new(&sol)?;
    let (kappa, tops) = ctx.gap_estimate(m_max)?;
    let last = if sol.params.d == 1 { 1 } else { m_max };
    let channels = (0..=last).map(|m| ctx.channel_spectrum(m, eigs)).collect::<Result<Vec<_>>>()?;
    let qhq = ctx.qhq_top(m_max)?;
    let mut csv = String::from("m,index,eigenvalue\n");
    for rep in &channels {
        for (i, v) in rep.eigenvalues.iter().enumerate() {
            csv.push_str(&format!("{},{},{:.16e}\n", rep.m, i, v));
        }
    }
    let summary = SpectrumSummary {
        a: sol.a,
        threshold: ctx.threshold,
        kappa,
        channel_tops: tops,
        bs_margin: ctx.bs_triviality_check()?,
        qhq_top: qhq,
        qhq_top_over_a: qhq / sol.a,
        channels,
    };
    session.write(cfg.out.join("spectrum.csv"), &csv)?;
    session.write_json(cfg.out.join("spectrum.json"), &summary)
}

#[derive(Serialize)]
struct DirectionSummary {
    name: String,
    seed: Option<u64>,
    extrapolated: f64,
    hessian_prediction: f64,
    relative_error: f64,
    zero_mode_fraction: f64,
    flagged: bool,
}

fn parse_epsilons(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| LabError::Precondition(format!("bad amplitude '{t}'"))))
        .collect()
}

fn cmd_stability(cfg: &RunConfig, session: &mut Session) -> Result<()> {
    let count = cfg.settings.or("directions", 10usize)?;
    let epsilons = match cfg.settings.get::<String>("epsilons")? {
        Some(t) => parse_epsilons(&t)?,
        None => DEFAULT_EPSILONS.to_vec(),
    };
    let sol = cached_optimizer(cfg, session)?;
    let ctx = HessianContext::new(&sol)?;
    let mut dirs: Vec<(String, Option<u64>, RadialProfile)> = Vec::with_capacity(count + 1);
    for k in 0..count {
        let seed = cfg.seed.wrapping_add(k as u64);
        dirs.push((format!("dir{k:02}"), Some(seed), random_direction(&ctx, seed)?));
    }
    dirs.push(("dilation".to_string(), None, dilation_direction(&ctx)?));
    let mut summary = Vec::with_capacity(dirs.len());
    for (name, seed, g) in dirs {
        let spec = PerturbationSpec { epsilons: epsilons.clone(), ..PerturbationSpec::new(g) };
        let curve = quotient_curve(&ctx, &spec)?;
        let flagged = curve.rows.iter().any(|r| r.flag.is_some());
        session.write(cfg.out.join(format!("stability_{name}.csv")), &reports_to_csv(&curve.rows))?;
        summary.push(DirectionSummary {
            name,
            seed,
            extrapolated: curve.extrapolated,
            hessian_prediction: curve.hessian_prediction,
            relative_error: (curve.extrapolated - curve.hessian_prediction).abs() / curve.hessian_prediction.abs(),
            zero_mode_fraction: curve.zero_mode_fraction,
            flagged,
        });
    }
    session.write_json(cfg.out.join("stability.json"), &summary)
}

#[derive(Serialize)]
struct FlowConfigEcho {
    params: Params,
    n: usize,
    grading: &'static str,
    tol: f64,
    sigma: f64,
    flow_rmax: f64,
    stop_tol: f64,
    window: usize,
    max_steps: usize,
    t_end: Option<f64>,
    dt0: f64,
}

#[derive(Serialize)]
struct FlowReport {
    config: FlowConfigEcho,
    stop: String,
    t_final: f64,
    accepted_steps: usize,
    rejected_steps: usize,
    final_energy: f64,
    max_energy_increase: f64,
    mass_drift: f64,
    final_p_integral: f64,
    theory: TheoryValues,
    p_relative_error: Option<f64>,
    l2_to_minimizer: Option<f64>,
}

fn cmd_flow(cfg: &RunConfig, session: &mut Session) -> Result<()> {
    let params = cfg.params;
    params.check_flow_window()?;
    let s = &cfg.settings;
    let sigma = s.or("sigma", 0.5)?;
    let flow_rmax = s.or("flow_rmax", 4.0)?;
    let defaults = StopSpec::default();
    let stop = StopSpec {
        tol: s.or("stop_tol", defaults.tol)?,
        window: s.or("window", defaults.window)?,
        max_steps: s.or("max_steps", defaults.max_steps)?,
        t_end: s.get("t_end")?,
        dt0: s.or("dt0", defaults.dt0)?,
        ..defaults
    };
    let sol = cached_optimizer(cfg, session)?;
    let tv = theory_values(&params, sol.a)?;
    let grid = make_grid(params.d, flow_rmax, cfg.n, cfg.grading)?;
    let op = FlowOperator::new(&params, &grid)?;
    let init = op.state(gaussian(&grid, sigma, params.mass)?, stop.dt0)?;
    let trace = op.run_flow(init, &stop)?;
    let rho = &trace.final_state.rho;
    let p_int = rho.power_integral(params.p);
    let (p_err, l2) = match (tv.regime, tv.p_m) {
        (Regime::Subcritical, Some(p_m)) => {
            let unit = scale_to_lchi_on(&sol.ell, p_m / params.mass.powf(params.p), params.p, &grid)?;
            let target = unit.scaled(params.mass);
            let diff: f64 = grid.weights.iter().zip(rho.values.iter().zip(&target.values)).map(|(w, (a, b))| w * (a - b).powi(2)).sum();
            let norm: f64 = grid.weights.iter().zip(&target.values).map(|(w, b)| w * b * b).sum();
            (Some((p_int - p_m).abs() / p_m), Some((diff / norm).sqrt()))
        }
        _ => (None, None),
    };
    session.note(format!("flow stopped: {}", trace.stop.label()));
    let report = FlowReport {
        config: FlowConfigEcho {
            params,
            n: cfg.n,
            grading: cfg.grading.as_str(),
            tol: cfg.solve.tol,
            sigma,
            flow_rmax,
            stop_tol: stop.tol,
            window: stop.window,
            max_steps: stop.max_steps,
            t_end: stop.t_end,
            dt0: stop.dt0,
        },
        stop: trace.stop.label().to_string(),
        t_final: trace.final_state.t,
        accepted_steps: trace.accepted_steps,
        rejected_steps: trace.rejected_steps,
        final_energy: trace.final_state.energy,
        max_energy_increase: trace.max_energy_increase,
        mass_drift: trace.mass_drift,
        final_p_integral: p_int,
        theory: tv,
        p_relative_error: p_err,
        l2_to_minimizer: l2,
    };
    session.write(cfg.out.join("flow_trace.csv"), &trace.to_csv())?;
    session.write(cfg.out.join("flow_final.csv"), &rho.to_csv())?;
    session.write_json(cfg.out.join("flow.json"), &report)
}

fn cmd_scattering(cfg: &RunConfig, session: &mut Session) -> Result<()> {
    let t_slices = cfg.settings.or("t_slices", 200usize)?;
    let r_points = cfg.settings.or("r_points", 61usize)?;
    let allow = cfg.settings.or("allow_nonmonotone", false)?;
    if r_points < 8 {
        return Err(LabError::Precondition("r_points must be at least 8".into()));
    }
    let sol = cached_optimizer(cfg, session)?;
    let prob = scattering_problem_from_with(&sol, allow)?;
    if prob.nonmonotone {
        session.note("potential is not nondecreasing; diagnostics are exploratory");
    }
    let scat = solve_scattering(&prob, &sol.grid)?;
    let bs_margin = HessianContext::new(&sol)?.bs_triviality_check()?;
    let h = if (prob.s - 1.0).abs() < 1e-12 {
        local_hamiltonian(&scat)?
    } else {
        let rl = sol.support_edge();
        let r: Vec<f64> = (0..r_points).map(|i| 1.4 * rl * i as f64 / (r_points - 1) as f64).collect();
        let (h, rep) = fractional_hamiltonian(&scat, &r, &default_t_grid(rl, prob.s, t_slices))?;
        session.note(format!(
            "t-integral: max tail fraction {:.3e}, max normalization defect {:.3e}",
            rep.max_tail_fraction, rep.max_normalization_defect
        ));
        h
    };
    let report = ScatteringReport {
        s: prob.s,
        tau: prob.tau,
        f_at_0: scat.f_at_0,
        origin_margin: scat.origin_margin(),
        max_monotonicity_violation: monotonicity_report(&h),
        residual: scat.residual,
        nonmonotone_potential: prob.nonmonotone,
        bs_margin,
    };
    session.write(cfg.out.join("scattering_f.csv"), &scat.f.to_csv())?;
    session.write(cfg.out.join("hamiltonian.csv"), &h.to_csv())?;
    session.write_json(cfg.out.join("scattering.json"), &report)
}

/// Execute one subcommand under the output lock and refresh the manifest.
pub fn run(cli: &Cli) -> Result<Session> {
    let cfg = RunConfig::from_settings(cli.settings()?)?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let mut session = Session::default();
    match &cli.command {
        Command::Constants => cmd_constants(&cfg, &mut session)?,
        Command::Optimize => cmd_optimize(&cfg, &mut session)?,
        Command::Spectrum { .. } => cmd_spectrum(&cfg, &mut session)?,
        Command::Stability { .. } => cmd_stability(&cfg, &mut session)?,
        Command::Flow { .. } => cmd_flow(&cfg, &mut session)?,
        Command::Scattering { .. } => cmd_scattering(&cfg, &mut session)?,
    }
    let manifest = build_manifest(&cfg.out)?;
    fs::write(cfg.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(session)
}
