//! Configuration, file formats, and command implementations for the `spde`
//! binary: simulate SPDE field samples, estimate their parameters, and run
//! Monte Carlo studies with reproducible per-replication RNG streams.

pub mod commands;
pub mod config;
pub mod io;

pub use commands::{
    exit_code, run_cache_build, run_constants, run_estimate, run_mc, run_simulate,
    ComponentSummary, McOutcome, McRow, ReplicationFailure, SimulateOutcome, StudySummary,
};
pub use config::{
    resolve, EstimatorKind, FieldFormat, MethodKind, MethodSpec, Overrides, ResolvedRun,
    RunConfig, SchemeSpec, SpatialKind, SpatialSpec, S3_POINTS,
};
pub use io::{read_field, write_field, FieldMeta};
