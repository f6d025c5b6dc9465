//! Numerical laboratory for the sharp Lane-Emden interaction inequality
//! `D(rho, rho) <= a ||rho||_1^{2 - p lambda/(d(p-1))} ||rho||_p^{p lambda/(d(p-1))}`
//! with Riesz interaction `D(f, g) = iint f(x) g(y) |x - y|^{-lambda}`.

pub mod error;
pub mod numerics;
pub mod radial_core;
pub mod riesz_kernel;
pub mod optimizer;
pub mod hessian_spec;
pub mod stability_lab;
pub mod free_energy_flow;
pub mod scattering_diag;
pub mod cli;

pub use error::{LabError, Result};
