//! Sorted group average treatment effects (GATES) for completely randomized experiments.
//!
//! Units are ranked by an arbitrary scoring rule and cut into `K` equal-sized
//! groups; the crate estimates the within-group average treatment effects,
//! their exact randomization variance, normal confidence intervals, and two
//! nonparametric tests:
//!
//! * homogeneity: all group effects equal the overall ATE (chi-squared reference);
//! * rank consistency: group effects are nondecreasing in the score
//!   (chi-bar-squared reference calibrated by Monte Carlo).
//!
//! Both sample splitting (a fixed scoring rule, [`estimator`], [`hypothesis`])
//! and cross-fitting (rules retrained per fold, [`crossfit`]) are supported.
//! [`sim`] provides a synthetic data generator and a Monte Carlo harness for
//! checking coverage, size, and power.

pub mod crossfit;
pub mod data;
pub mod error;
pub mod estimator;
pub mod grouping;
pub mod hypothesis;
pub mod numerics;
pub mod sim;

pub use crossfit::{run_crossfit, CrossFitResult, TrainerSpec};
pub use data::{load_dataset, ColumnSchema, ExperimentDataset, FoldAssignment};
pub use error::{Arm, Error, Result};
pub use estimator::{estimate_ate, estimate_gates, estimate_gates_variance, GatesResult};
pub use grouping::{assign_groups, GroupAssignment};
pub use hypothesis::{build_sigma, het_test, isotonic_projection, rank_test, CovMatrix, TestResult};
pub use numerics::RngStream;

/// Default eigenvalue floor used when repairing covariance matrices.
pub const DEFAULT_PD_FLOOR: f64 = 1e-10;

/// Default number of Monte Carlo draws for the rank-consistency test.
pub const DEFAULT_RANK_TEST_DRAWS: usize = 100_000;
