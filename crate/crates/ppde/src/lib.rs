//! Parametrix construction for path-dependent parabolic equations whose
//! coefficients depend on the current state and on a running integral
//! `I_t = ∫_0^t x(r) dA_r` against a deterministic driver of bounded
//! variation.

pub mod bv_driver;
pub mod cli_harness;
pub mod coefficient_field;
pub mod error;
pub mod gaussian_kernel;
pub mod interp;
pub mod parametrix;
pub mod path;
pub mod ppde_solver;
pub mod quad;
pub mod sde_simulator;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/drivers.md")]
    mod drivers {}
    #[doc = include_str!("../../../book/src/admissibility.md")]
    mod admissibility {}
    #[doc = include_str!("../../../book/src/densities.md")]
    mod densities {}
    #[doc = include_str!("../../../book/src/value-functions.md")]
    mod value_functions {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/validation.md")]
    mod validation {}
}

pub use bv_driver::{BVDriver, DriverKind, ExponentEstimate, MomentTriple};
pub use coefficient_field::{
    compute_admissibility, probe_hypotheses, AdmissibilityReport, Bounds, CoefficientField, HolderConstants, StateFn,
};
pub use error::{Error, Result};
pub use gaussian_kernel::{KernelFrame, State, WindowGeometry};
pub use parametrix::{DensityField, DensityValue, Parametrix, ParametrixConfig, ParametrixTable, PhiValue};
pub use path::GridPath;
