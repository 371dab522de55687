//! Spectral simulation and parameter estimation for linear second-order
//! SPDEs on the unit hypercube with damped cylindrical noise.
//!
//! The crate provides:
//! - closed-form spectral quantities (eigenpairs, moment constants, CLT
//!   series constants) in [`model`],
//! - shared numerical kernels (special functions, RNG streams, least
//!   squares) in [`numerics`],
//! - two exact-in-law field simulators (mode truncation and high-mode
//!   replacement) in [`simulate`],
//! - realized-volatility based estimators for the volatility, the natural
//!   parameters, and the damping exponent in [`estimate`].

pub mod error;
pub mod estimate;
pub mod model;
pub mod numerics;
pub mod simulate;

pub use error::{Result, SpdeError};
pub use model::{
    FieldSample, InitialCondition, MethodTag, ModelParams, MultiIndex, SamplingScheme,
};
pub use numerics::RngStream;
pub use estimate::{
    estimate_alpha, estimate_sigma_point, estimate_sigma_pooled, log_linear_fit, quarticity,
    realized_volatility, thin_time_grid, validate_scheme, AlphaChoice, EstimationReport,
    ReportComponent, SchemeDiagnostics, DEFAULT_CI_LEVEL, DEFAULT_SERIES_TOL,
};
pub use simulate::{
    build_cache, replacement_rv_expectation, simulate_replacement, simulate_truncation,
    CacheReport, ReplacementCache, ReplacementSettings, TruncationSettings,
};
