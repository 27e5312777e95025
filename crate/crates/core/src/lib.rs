//! Estimation and inference for the average treatment effect in
//! covariate-adaptive randomized experiments whose baseline covariates
//! contain missing values.
//!
//! The crate provides:
//! - trial-data validation, stratum indexing, and imbalance diagnostics
//!   ([`model`]);
//! - randomization engines: simple, stratified permuted blocks, and
//!   Pocock-Simon minimization ([`randomize`]);
//! - missingness processors: complete-covariate analysis, single
//!   imputation, the missing-indicator method, and complete-case deletion
//!   ([`missing`]);
//! - a weighted least-squares kernel with rank-revealing column
//!   elimination ([`regress`]);
//! - the estimator matrix: Fisher / Lin / ToM regression adjustments,
//!   stratum-common and stratum-specific, with matched variance estimators
//!   ([`estimators`], [`variance`]);
//! - simulation data-generating processes and a deterministic, parallel
//!   Monte Carlo harness ([`sim`]).

// Index-based loops over matrix rows/columns read better than iterator
// chains in the dense-algebra code.
#![allow(clippy::needless_range_loop)]

pub mod estimators;
pub mod mat;
pub mod missing;
pub mod model;
pub mod randomize;
pub mod regress;
pub mod sim;
pub mod variance;

pub use estimators::{
    estimate, AdjustedEstimate, DfMode, EstimatorSpec, MissingnessChoice, RegressionKind, Scope,
};
pub use mat::Matrix;
pub use missing::{ImputePolicy, MissingnessMethod, ProcessedCovariates};
pub use model::{build_index, imbalance, Mask, StratumIndex, TrialData};
pub use randomize::RandomizationScheme;
pub use sim::{DgpSpec, OutcomeModel, SimulationReport, Study};
