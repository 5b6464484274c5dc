//! Monte-Carlo solvers for semilinear parabolic PDEs written as stochastic
//! fixed-point equations for the pair `(u, grad u)`.
//!
//! The gradient is represented with Bismut-Elworthy-Li weights, so only the
//! forward diffusion and its first variation are ever simulated.

pub mod bel;
pub mod error;
pub mod estimators;
pub mod picard;
pub mod presets;
pub mod problem;
pub mod report;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod verification;

pub use bel::{bel_weight, weight_moment_bound, weight_moment_report, BelWeight, MomentReport};
pub use error::{Error, Result};
pub use estimators::{estimate_gradient_bel, estimate_value, estimate_value_gradient, McConfig, Quadrature};
pub use picard::{
    fixed_point_residual, mlp_evaluate, picard_evaluate, solve, terminal_value, PicardConfig, Scheme, ValueGradient,
};
pub use problem::{CoefficientField, Constants, Diffusion, Drift, LyapunovVq, ProblemSpec};
pub use rng::RngStream;
pub use sde::{SdePath, TimeGrid, VariationPath};
pub use stats::Estimate;
pub use verification::{
    convergence_study, gradient_crosscheck, moment_certificates, pde_residual, CrosscheckReport, ResidualReport,
    StudyAxis,
};

pub use nalgebra::{DMatrix, DVector};
