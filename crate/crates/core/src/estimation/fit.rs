use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::likelihood::{check_full_rank, ProfiledObjective};
use super::optimize::{fd_hessian, minimize, OptimOptions};
use super::{natural_params, CovarianceParams, Method, ModelSpec, NaturalParam, ParamScale, RandomEffects};
use crate::covariance::{
    GroupedDiagonalError, KroneckerAr1, MarkerAr1, RandomEffectsCov, ResidualKind, ResidualStructure,
};
use crate::data::{build_design, Marker, StackedDataset, SubjectDesign};
use crate::error::{Error, Result};
use crate::inference::{aic, cov_to_corr, normal_quantile, parameter_count, wald_test};

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub optim: OptimOptions,
    /// Unconstrained starting point; the default start is used when `None`.
    pub start: Option<Vec<f64>>,
    pub standard_errors: bool,
    /// Coverage of the reported Wald intervals.
    pub confidence: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            optim: OptimOptions::default(),
            start: None,
            standard_errors: true,
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffect {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// `wald-log`, `wald-atanh` or `wald`: the scale the interval was built on.
    pub interval: String,
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub random_effects: RandomEffects,
    pub residual: ResidualKind,
    pub n_subjects: usize,
    pub n_observations: usize,
    pub fixed_effects: Vec<FixedEffect>,
    pub covariance: Vec<CovarianceEstimate>,
    /// Random-effect names (rows/columns of `g`).
    pub random_effect_names: Vec<String>,
    pub g: Option<Vec<Vec<f64>>>,
    pub g_correlation: Option<Vec<Vec<f64>>>,
    pub process_cov: Option<[[f64; 2]; 2]>,
    pub rho: Option<f64>,
    pub marker_rho: Option<[f64; 2]>,
    pub error_variances: Option<[f64; 2]>,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub aic: f64,
    pub converged: bool,
    pub hessian_positive_definite: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub message: String,
    pub warnings: Vec<String>,
    /// Unconstrained coordinates at the optimum.
    pub theta: Vec<f64>,
}

impl FitResult {
    pub fn covariance_estimate(&self, name: &str) -> Option<&CovarianceEstimate> {
        self.covariance.iter().find(|c| c.name == name)
    }

    pub fn fixed_effect(&self, name: &str) -> Option<&FixedEffect> {
        self.fixed_effects.iter().find(|c| c.name == name)
    }
}

fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn marker_response_variances(designs: &[SubjectDesign]) -> [f64; 2] {
    let mut vals: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for d in designs {
        for (r, m) in d.markers.iter().enumerate() {
            vals[m.index()].push(d.y[r]);
        }
    }
    [sample_variance(&vals[0]), sample_variance(&vals[1])]
}

/// Deterministic starting coordinates: per-marker OLS residual variance `s²_k`,
/// split equally over the variance components present for the error variances;
/// `G` and `C` diagonal at `0.1 s²_k` (`G` scaled by the mean square of its
/// design column); AR(1) correlations `0.1`.
pub fn default_start(designs: &[SubjectDesign], spec: &ModelSpec) -> Result<Vec<f64>> {
    let p = spec.design.n_fixed();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for d in designs {
        xtx += d.x.transpose() * &d.x;
        xty += d.x.transpose() * &d.y;
    }
    check_full_rank(&xtx, &spec.fixed_effect_names())?;
    let beta = xtx
        .cholesky()
        .ok_or_else(|| Error::RankDeficient {
            columns: spec.fixed_effect_names(),
        })?
        .solve(&xty);

    let mut rss = [0.0; 2];
    let mut count = [0usize; 2];
    let q = spec.design.n_fixed();
    let mut zsq = vec![0.0; q];
    let mut zcount = [0usize; 2];
    for d in designs {
        let r = &d.y - &d.x * &beta;
        for (i, m) in d.markers.iter().enumerate() {
            rss[m.index()] += r[i] * r[i];
            count[m.index()] += 1;
            zcount[m.index()] += 1;
            for j in 0..q {
                zsq[j] += d.z[(i, j)].powi(2);
            }
        }
    }
    let var_y = marker_response_variances(designs);
    let mut s2 = [0.0; 2];
    for k in 0..2 {
        let pk = spec.design.marker_columns(Marker::from_index(k).unwrap());
        let dof = count[k].saturating_sub(pk).max(1);
        let floor = if var_y[k] > 0.0 { 1e-6 * var_y[k] } else { 1e-6 };
        s2[k] = (rss[k] / dof as f64).max(floor);
    }

    let n_components = usize::from(spec.random_effects != RandomEffects::None)
        + usize::from(spec.residual.has_serial())
        + usize::from(spec.residual.has_error());
    let err = GroupedDiagonalError {
        sigma2: [s2[0] / n_components as f64, s2[1] / n_components as f64],
    };
    let kron = || KroneckerAr1::from_entries(0.1 * s2[0], 0.0, 0.1 * s2[1], 0.1);
    let residual = match spec.residual {
        ResidualKind::GroupedDiagonal => ResidualStructure::GroupedDiagonal(err),
        ResidualKind::KroneckerAr1PlusError => ResidualStructure::KroneckerAr1PlusError(kron()?, err),
        ResidualKind::KroneckerAr1Only => ResidualStructure::KroneckerAr1Only(kron()?),
        ResidualKind::IndependentAr1PlusError => ResidualStructure::IndependentAr1PlusError(
            [MarkerAr1::new(0.1 * s2[0], 0.1)?, MarkerAr1::new(0.1 * s2[1], 0.1)?],
            err,
        ),
    };
    let g = match spec.random_effects {
        RandomEffects::None => None,
        RandomEffects::Slopes { independent } => {
            let q1 = spec.marker_dims()[0];
            let diag = DVector::from_fn(q, |j, _| {
                let k = if j < q1 { 0 } else { 1 };
                let ms = if zcount[k] > 0 { zsq[j] / zcount[k] as f64 } else { 0.0 };
                let scale = if ms > 0.0 { ms } else { 1.0 };
                0.1 * s2[k] / scale
            });
            Some(RandomEffectsCov::from_matrix(
                &DMatrix::from_diagonal(&diag),
                spec.marker_dims(),
                independent,
            )?)
        }
    };
    Ok(CovarianceParams { g, residual }.theta())
}

/// Coordinates of `target` that reproduce the covariance of a fit of a submodel
/// with the same residual structure (for example the masked random-slopes model
/// inside the full one). Starting there, the larger model cannot end below the
/// submodel's likelihood.
pub fn nested_start(sub: &FitResult, target: &ModelSpec) -> Result<Vec<f64>> {
    if sub.residual != target.residual {
        return Err(Error::invalid("submodel and target differ in residual structure"));
    }
    let n_res = target.residual.n_params();
    let residual = &sub.theta[sub.theta.len() - n_res..];
    let mut theta = match (target.random_effects, &sub.g) {
        (RandomEffects::None, None) => Vec::new(),
        (RandomEffects::Slopes { independent }, Some(g)) => {
            let n = g.len();
            let m = DMatrix::from_fn(n, n, |i, j| g[i][j]);
            RandomEffectsCov::from_matrix(&m, target.marker_dims(), independent)?
                .theta()
                .to_vec()
        }
        _ => return Err(Error::invalid("submodel and target differ in random effects")),
    };
    theta.extend_from_slice(residual);
    Ok(theta)
}

/// Fits `spec` to a stacked dataset.
pub fn fit(data: &StackedDataset, spec: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let designs = build_design(data, &spec.design)?;
    fit_designs(&designs, spec, options)
}

fn natural_vector(spec: &ModelSpec, theta: &[f64]) -> Result<Vec<NaturalParam>> {
    Ok(natural_params(spec, &CovarianceParams::from_theta(spec, theta)?))
}

/// Jacobian of the natural-scale parameters with respect to the coordinates.
fn natural_jacobian(spec: &ModelSpec, theta: &[f64]) -> Result<DMatrix<f64>> {
    let n = theta.len();
    let m = natural_vector(spec, theta)?.len();
    let mut j = DMatrix::zeros(m, n);
    for c in 0..n {
        let h = 1e-6 * (1.0 + theta[c].abs());
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[c] += h;
        tm[c] -= h;
        let fp = natural_vector(spec, &tp)?;
        let fm = natural_vector(spec, &tm)?;
        for r in 0..m {
            j[(r, c)] = (fp[r].value - fm[r].value) / (2.0 * h);
        }
    }
    Ok(j)
}

fn wald_interval(p: &NaturalParam, se: f64, z: f64) -> (f64, f64, &'static str) {
    if !se.is_finite() {
        return (f64::NAN, f64::NAN, "none");
    }
    match p.scale {
        ParamScale::Variance if p.value > 0.0 => {
            let s = se / p.value;
            (p.value * (-z * s).exp(), p.value * (z * s).exp(), "wald-log")
        }
        ParamScale::Correlation if p.value.abs() < 1.0 => {
            let a = p.value.atanh();
            let s = se / (1.0 - p.value * p.value);
            ((a - z * s).tanh(), (a + z * s).tanh(), "wald-atanh")
        }
        _ => (p.value - z * se, p.value + z * se, "wald"),
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Fits `spec` to prebuilt per-subject designs.
pub fn fit_designs(designs: &[SubjectDesign], spec: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    if designs.is_empty() || designs.iter().all(|d| d.n_rows() == 0) {
        return Err(Error::invalid("dataset is empty"));
    }
    let objective = ProfiledObjective::new(designs, spec)?;
    let start = match &options.start {
        Some(s) => {
            if s.len() != spec.n_covariance_params() {
                return Err(Error::invalid(format!(
                    "start vector has {} entries, model needs {}",
                    s.len(),
                    spec.n_covariance_params()
                )));
            }
            s.clone()
        }
        None => default_start(designs, spec)?,
    };
    let eval = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let e = objective.value_and_gradient(x.as_slice())?;
        Ok((e.negloglik, e.gradient.expect("gradient requested")))
    };
    let outcome = minimize(eval, &DVector::from_vec(start), &options.optim)?;
    let theta = outcome.x.as_slice().to_vec();
    let final_eval = objective.value(&theta)?;
    let params = CovarianceParams::from_theta(spec, &theta)?;
    let naturals = natural_params(spec, &params);

    let grad_only = |x: &DVector<f64>| objective.value_and_gradient(x.as_slice()).map(|e| e.gradient.unwrap());
    let hessian = fd_hessian(&grad_only, &outcome.x).ok();
    let h_chol = hessian.clone().and_then(|h| h.cholesky());
    let hessian_pd = h_chol.is_some();

    let mut warnings = Vec::new();
    let mut message = outcome.message.clone();
    let converged = outcome.converged && hessian_pd;
    if outcome.converged && !hessian_pd {
        message = "gradient criterion met but the Hessian is not positive definite".into();
    }

    let z = normal_quantile(0.5 + options.confidence / 2.0);
    let se_nat: Vec<f64> = match (&h_chol, options.standard_errors) {
        (Some(ch), true) => {
            let j = natural_jacobian(spec, &theta)?;
            let cov = &j * ch.inverse() * j.transpose();
            (0..naturals.len()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect()
        }
        _ => vec![f64::NAN; naturals.len()],
    };

    let var_y = marker_response_variances(designs);
    let pooled_var = var_y[0].max(var_y[1]);
    let covariance: Vec<CovarianceEstimate> = naturals
        .iter()
        .zip(&se_nat)
        .map(|(p, &se)| {
            let (lo, hi, interval) = wald_interval(p, se, z);
            let scale_var = p.marker.map_or(pooled_var, |m| var_y[m.index()]);
            let boundary = p.scale == ParamScale::Variance && p.value < 1e-8 * scale_var;
            if boundary {
                warnings.push(format!("{} is at the lower boundary ({:.3e})", p.name, p.value));
            }
            CovarianceEstimate {
                name: p.name.clone(),
                estimate: p.value,
                se,
                ci_lower: lo,
                ci_upper: hi,
                interval: interval.to_string(),
                boundary,
            }
        })
        .collect();

    if let ResidualStructure::KroneckerAr1PlusError(k, _) = &params.residual {
        if k.rho().abs() < 0.05 {
            warnings.push(format!(
                "|rho| = {:.4} < 0.05: serial and measurement-error variances are weakly identified",
                k.rho().abs()
            ));
        }
    }

    let names = spec.fixed_effect_names();
    let fixed_effects = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let estimate = final_eval.beta[i];
            let se = final_eval.beta_cov[(i, i)].max(0.0).sqrt();
            let (zv, p) = wald_test(estimate, se).unwrap_or((f64::NAN, f64::NAN));
            FixedEffect {
                name: name.clone(),
                estimate,
                se,
                z: zv,
                p_value: p,
            }
        })
        .collect();

    let log_likelihood = -final_eval.negloglik;
    let n_params = parameter_count(spec);
    let (process_cov, rho, marker_rho) = match &params.residual {
        ResidualStructure::KroneckerAr1PlusError(k, _) | ResidualStructure::KroneckerAr1Only(k) => {
            let c = k.c();
            (Some([[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]]), Some(k.rho()), None)
        }
        ResidualStructure::IndependentAr1PlusError(ar, _) => (
            Some([[ar[0].sigma2, 0.0], [0.0, ar[1].sigma2]]),
            None,
            Some([ar[0].rho, ar[1].rho]),
        ),
        ResidualStructure::GroupedDiagonal(_) => (None, None, None),
    };
    let g_corr = match &params.g {
        Some(g) => Some(to_rows(&cov_to_corr(g.g())?)),
        None => None,
    };

    Ok(FitResult {
        method: spec.method,
        random_effects: spec.random_effects,
        residual: spec.residual,
        n_subjects: designs.len(),
        n_observations: objective.n_obs(),
        fixed_effects,
        covariance,
        random_effect_names: if params.g.is_some() { names } else { Vec::new() },
        g: params.g.as_ref().map(|g| to_rows(g.g())),
        g_correlation: g_corr,
        process_cov,
        rho,
        marker_rho,
        error_variances: params.residual.error().map(|e| e.sigma2),
        log_likelihood,
        n_params,
        aic: aic(log_likelihood, n_params),
        converged,
        hessian_positive_definite: hessian_pd,
        iterations: outcome.iterations,
        gradient_norm: outcome.grad.norm(),
        message,
        warnings,
        theta,
    })
}
