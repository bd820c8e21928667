//! Bismut-type Malliavin calculus for diffusions driven by vector fields.
//!
//! The crate builds lifted (augmented) diffusion systems, simulates them with
//! reproducible parallel Monte Carlo, turns ensembles into semigroup-level
//! estimates, cross-checks those against a finite-difference parabolic solver
//! and packages the resulting identities as pass/fail experiments.

// `!(a <= b)` is used on purpose so that NaN fails a tolerance.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod config;
pub mod field_model;
pub mod identity_suite;
pub mod linalg;
pub mod mc_semigroup;
pub mod pde_oracle;
pub mod sde_engine;

pub use config::{parse_config, ExperimentConfig, ExperimentKind, ModelConfig, RunConfig, Verbosity};
pub use field_model::{
    AugmentationSpec, AugmentedSystem, ModelError, PerturbationSchedule, StateFeedbackSchedule, TestFunction,
    VectorField, VectorFieldSet,
};
pub use identity_suite::{run_suite, write_artifacts, ExperimentReport, SuiteError, SuiteOutcome, Verdict};
pub use mc_semigroup::{McConfig, McError, SemigroupEstimate, Stats};
pub use pde_oracle::{GridSolution, PdeError};
pub use sde_engine::{PathEnsemble, SimError, SimOptions, TimeGrid};
