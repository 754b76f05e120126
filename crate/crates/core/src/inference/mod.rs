//! Model comparison and reporting arithmetic.

mod dist;
mod report;

pub use dist::{chi2_quantile, chi2_sf, erfc, gamma_p, gamma_q, ln_gamma, normal_cdf, normal_quantile, normal_sf};
pub use report::{format_sig, ComparisonReport, LrtRow, ModelRow, NestedPair};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::ModelSpec;

/// Slack allowed when the alternative's log-likelihood falls below the null's.
pub const NESTING_SLACK: f64 = 1e-6;

/// `-2 logL + 2 k`.
pub fn aic(log_likelihood: f64, n_params: usize) -> f64 {
    -2.0 * log_likelihood + 2.0 * n_params as f64
}

/// Fixed-effect columns plus free covariance parameters.
pub fn parameter_count(spec: &ModelSpec) -> usize {
    spec.design.n_fixed() + spec.n_covariance_params()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// `2 (logL_alt - logL_null)` against a chi-square with `df` degrees of freedom.
pub fn likelihood_ratio_test(logl_null: f64, logl_alt: f64, df: usize) -> Result<LrtResult> {
    if df == 0 {
        return Err(Error::invalid("likelihood-ratio test needs df >= 1"));
    }
    if logl_alt < logl_null - NESTING_SLACK {
        return Err(Error::NestingViolation {
            null: logl_null,
            alt: logl_alt,
        });
    }
    let statistic = (2.0 * (logl_alt - logl_null)).max(0.0);
    Ok(LrtResult {
        statistic,
        df,
        p_value: chi2_sf(statistic, df as f64),
    })
}

/// `z = estimate / se` with a two-sided normal p-value.
pub fn wald_test(estimate: f64, se: f64) -> Result<(f64, f64)> {
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::invalid(format!("standard error must be positive, got {se}")));
    }
    let z = estimate / se;
    Ok((z, (2.0 * normal_sf(z.abs())).min(1.0)))
}

/// `M[i,j] / sqrt(M[i,i] M[j,j])`.
pub fn cov_to_corr(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid("covariance matrix must be square"));
    }
    let n = m.nrows();
    let sd: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    if let Some(i) = sd.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::invalid(format!("diagonal entry {i} is not positive ({})", sd[i])));
    }
    let sd: Vec<f64> = sd.into_iter().map(f64::sqrt).collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            (m[(i, j)] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
        }
    }))
}

/// Covariance-parameter estimates as printed for the `UN@AR(1)` structure with
/// exponential local effects: `UN(x,y)` entries, `EXP VAR` (δ), `Residual` (r)
/// and `AR(1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SasOutputBundle {
    /// `(σ²_w1, σ_w1w2, σ²_w2)`.
    pub un_entries: [f64; 3],
    pub exp_var_delta: f64,
    pub residual_r: f64,
    pub ar1_cov: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SasTranslation {
    pub sigma2_eps: [f64; 2],
    pub rho: f64,
    /// `[[σ²_w1, σ_w1w2], [σ_w1w2, σ²_w2]]`.
    pub process_cov: [[f64; 2]; 2],
}

/// `σ²_ε1 = r e^δ`, `σ²_ε2 = r e^-δ`, `ρ = AR(1) / r`; `C` passes through.
pub fn sas_translate(bundle: &SasOutputBundle) -> Result<SasTranslation> {
    let r = bundle.residual_r;
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidBundle(format!("Residual must be positive, got {r}")));
    }
    let rho = bundle.ar1_cov / r;
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidBundle(format!(
            "AR(1) / Residual = {rho} is not a correlation in (-1, 1)"
        )));
    }
    let [v1, c12, v2] = bundle.un_entries;
    Ok(SasTranslation {
        sigma2_eps: [r * bundle.exp_var_delta.exp(), r * (-bundle.exp_var_delta).exp()],
        rho,
        process_cov: [[v1, c12], [c12, v2]],
    })
}

impl SasOutputBundle {
    /// The bundle that [`sas_translate`] maps back to the given natural parameters.
    pub fn from_natural(sigma2_eps: [f64; 2], rho: f64, un_entries: [f64; 3]) -> Result<Self> {
        if !(sigma2_eps[0] > 0.0 && sigma2_eps[1] > 0.0) {
            return Err(Error::InvalidBundle("error variances must be positive".into()));
        }
        if !(rho.abs() < 1.0) {
            return Err(Error::InvalidBundle(format!("rho = {rho} outside (-1, 1)")));
        }
        let r = (sigma2_eps[0] * sigma2_eps[1]).sqrt();
        Ok(Self {
            un_entries,
            exp_var_delta: 0.5 * (sigma2_eps[0] / sigma2_eps[1]).ln(),
            residual_r: r,
            ar1_cov: rho * r,
        })
    }
}
