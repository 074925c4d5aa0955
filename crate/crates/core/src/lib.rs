//! G-estimation of instrumental-variable causal effects under structural
//! mean models, with a sensitivity analysis for instruments that violate
//! the exclusion or exogeneity assumptions.
//!
//! The violation is indexed by a scalar α on the model's link scale. For
//! each α the estimator solves a stacked system of estimating equations
//! (nuisance models plus the causal row) and reports a sandwich-variance
//! Wald interval. Sweeping α traces how the conclusion depends on the
//! assumed violation.

pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod mestim;
pub mod sensitivity;
pub mod simulation;
pub mod smm;

pub use data::{Dataset, Observation};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use mestim::{
    bread_matrix, meat_matrix, sandwich_variance, solve_scalar_root, wald_ci, RootSearch,
    SandwichCovariance, StackedSystem,
};
pub use sensitivity::{
    alpha_grid, closed_form_linear, fit_g_estimator, relevance_check, sweep_alpha, FitOptions,
    FitStatus, GEstimate, RelevanceCheck, SweepResult,
};
pub use simulation::{
    calibrate_linear, calibrate_logistic, generate_linear, generate_logistic, run_monte_carlo,
    DgpConfig, FixedCoefficients, LinearDgpConfig, LogisticDgpConfig, MonteCarloReport,
};
pub use smm::{expit, logit, Link, SmmSpec};
