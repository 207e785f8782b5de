//! Numerical building blocks shared by the estimators and tests.

pub mod linalg;
pub mod rng;
pub mod special;

pub use linalg::{least_squares, solve_spd, LeastSquaresFit};
pub use rng::{mvn_sample, RngStream};
pub use special::{chi2_sf, normal_quantile, reg_incomplete_beta};
