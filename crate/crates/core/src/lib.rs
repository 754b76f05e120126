//! Bivariate linear mixed models for longitudinal two-marker data.
//!
//! The crate fits models of the form `Y_i = X_i β + Z_i γ_i + W_i + ε_i` where the
//! response of each subject stacks two markers, `γ_i ~ N(0, G)` are random effects,
//! `W_i` is a bivariate AR(1) serial process with Kronecker covariance `C ⊗ AR1(ρ)`
//! and `ε_i` is measurement error with one variance per marker. Fixed effects are
//! profiled out by generalized least squares and the covariance parameters are
//! estimated by maximizing the marginal (ML) or restricted (REML) likelihood.
//!
//! Modules:
//! - [`data`]: long/wide input, stacking, baseline differencing, design matrices.
//! - [`covariance`]: covariance structures and the marginal covariance `V_i`.
//! - [`estimation`]: profiled likelihood, analytic gradient and the optimizer.
//! - [`inference`]: AIC, likelihood-ratio and Wald tests, correlation matrices.
//! - [`simulate`]: synthetic cohorts with known truth and MAR missingness.
//! - [`cli`]: configuration files, reports and the command implementations.

pub mod cli;
pub mod covariance;
pub mod data;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod simulate;

pub use error::{Error, Result};
