//! Stochastic flows with rough drift: Euler–Maruyama ensembles, the
//! density of the pushed-forward Gaussian measure along the flow, the
//! quantitative bounds on it, and a Fokker–Planck solver for cross-checks.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::type_complexity,
    clippy::manual_is_multiple_of
)]

pub mod budget;
pub mod coefficients;
pub mod convergence;
pub mod density;
pub mod error;
pub mod fokker_planck;
pub mod gaussian;
pub mod quadrature;
pub mod rng;
pub mod runner;
pub mod sde;
pub mod stats;

pub use budget::{budget_constants, BoundBudget};
pub use coefficients::{
    builtin_coefficients, CoefficientField, FieldMeta, FieldParams, ParamValue, PointEval, RegularizationLevel,
};
pub use convergence::{CouplingTable, KrylovResult, SupportBox};
pub use density::{DensityForm, DensityRecord};
pub use error::{Error, Result};
pub use fokker_planck::{FPGrid, FPOptions, FPSolution};
pub use gaussian::GaussianQuadrature;
pub use runner::{ExperimentConfig, Report, ReportRow};
pub use sde::{BrownianPath, EnsembleSpec, FlowEnsemble, InitialPoints, NoiseMode, TimeGrid};
pub use stats::Estimate;
