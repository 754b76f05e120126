use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use super::{CovarianceParams, Method, ModelSpec};
use crate::covariance::build_marginal_cov;
use crate::data::SubjectDesign;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const MAX_CONDITION: f64 = 1e12;
const RANK_TOL: f64 = 1e-10;

/// Result of one objective evaluation at fixed covariance parameters.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Negative (restricted) log-likelihood.
    pub negloglik: f64,
    /// GLS fixed effects.
    pub beta: DVector<f64>,
    /// `(Σ Xᵀ V⁻¹ X)⁻¹`, the covariance of `beta`.
    pub beta_cov: DMatrix<f64>,
    pub gradient: Option<DVector<f64>>,
}

struct SubjectFactor {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    vinv_x: DMatrix<f64>,
}

/// Profiled negative log-likelihood over the unconstrained covariance coordinates.
pub struct ProfiledObjective<'a> {
    designs: &'a [SubjectDesign],
    spec: &'a ModelSpec,
    names: Vec<String>,
    n_obs: usize,
}

/// Indices of columns whose pivot in a greedy Cholesky of `a` is below
/// `RANK_TOL` relative to the column's diagonal.
pub(crate) fn collinear_columns(a: &DMatrix<f64>) -> Vec<usize> {
    let mut accepted: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..a.nrows() {
        let ajj = a[(j, j)];
        let pivot = if accepted.is_empty() {
            ajj
        } else {
            let sub = DMatrix::from_fn(accepted.len(), accepted.len(), |r, c| a[(accepted[r], accepted[c])]);
            let col = DVector::from_fn(accepted.len(), |r, _| a[(accepted[r], j)]);
            match sub.cholesky() {
                Some(ch) => ajj - col.dot(&ch.solve(&col)),
                None => 0.0,
            }
        };
        if !(ajj > 0.0) || !(pivot > RANK_TOL * ajj) {
            bad.push(j);
        } else {
            accepted.push(j);
        }
    }
    bad
}

pub(crate) fn check_full_rank(a: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let bad = collinear_columns(a);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient {
            columns: bad.into_iter().map(|j| names[j].clone()).collect(),
        })
    }
}

impl<'a> ProfiledObjective<'a> {
    pub fn new(designs: &'a [SubjectDesign], spec: &'a ModelSpec) -> Result<Self> {
        spec.validate()?;
        let p = spec.design.n_fixed();
        for d in designs {
            let n = d.n_rows();
            if d.x.nrows() != n || d.x.ncols() != p || d.z.nrows() != n || d.markers.len() != n || d.occasions.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "subject {}: design has shape {:?}, expected {} rows and {} columns",
                    d.subject,
                    d.x.shape(),
                    n,
                    p
                )));
            }
        }
        Ok(Self {
            designs,
            spec,
            names: spec.fixed_effect_names(),
            n_obs: designs.iter().map(|d| d.n_rows()).sum(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn designs(&self) -> &[SubjectDesign] {
        self.designs
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_covariance_params()
    }

    pub fn value(&self, theta: &[f64]) -> Result<Evaluation> {
        self.evaluate(theta, false)
    }

    pub fn value_and_gradient(&self, theta: &[f64]) -> Result<Evaluation> {
        self.evaluate(theta, true)
    }

    fn factor_subject(&self, d: &SubjectDesign, params: &CovarianceParams) -> Result<SubjectFactor> {
        let v = build_marginal_cov(d, params.g.as_ref(), &params.residual)?;
        let chol = v.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            subject: d.subject.clone(),
        })?;
        let l = chol.l_dirty();
        let n = d.n_rows();
        let mut logdet = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let lii = l[(i, i)];
            logdet += 2.0 * lii.ln();
            lo = lo.min(lii);
            hi = hi.max(lii);
        }
        if n > 0 {
            let condition = (hi / lo).powi(2);
            if !(condition <= MAX_CONDITION) {
                return Err(Error::NearSingular {
                    subject: d.subject.clone(),
                    condition,
                });
            }
        }
        let vinv_x = chol.solve(&d.x);
        Ok(SubjectFactor { chol, logdet, vinv_x })
    }

    fn evaluate(&self, theta: &[f64], with_gradient: bool) -> Result<Evaluation> {
        let params = CovarianceParams::from_theta(self.spec, theta)?;
        let p = self.spec.design.n_fixed();
        let factors: Vec<SubjectFactor> = self
            .designs
            .par_iter()
            .map(|d| self.factor_subject(d, &params))
            .collect::<Result<_>>()?;

        let mut a = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        let mut logdet = 0.0;
        for (d, f) in self.designs.iter().zip(&factors) {
            a += d.x.transpose() * &f.vinv_x;
            b += f.vinv_x.transpose() * &d.y;
            logdet += f.logdet;
        }
        a = (&a + a.transpose()) * 0.5;
        check_full_rank(&a, &self.names)?;
        let a_chol = a.clone().cholesky().ok_or_else(|| Error::RankDeficient {
            columns: self.names.clone(),
        })?;
        let beta = a_chol.solve(&b);
        let beta_cov = a_chol.inverse();
        let logdet_a: f64 = 2.0 * a_chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();

        let reml = self.spec.method == Method::Reml;
        let g_dim = params.g.as_ref().map_or(0, |g| g.dim());
        let n_res = self.spec.residual.n_params();

        struct Second {
            quad: f64,
            p_g: Option<DMatrix<f64>>,
            res_grad: Vec<f64>,
        }
        let second: Vec<Second> = self
            .designs
            .par_iter()
            .zip(factors.par_iter())
            .map(|(d, f)| {
                let r = &d.y - &d.x * &beta;
                let alpha = f.chol.solve(&r);
                let quad = r.dot(&alpha);
                if !with_gradient {
                    return Second {
                        quad,
                        p_g: None,
                        res_grad: Vec::new(),
                    };
                }
                let mut m = f.chol.inverse();
                m -= &alpha * alpha.transpose();
                if reml {
                    m -= &f.vinv_x * &beta_cov * f.vinv_x.transpose();
                }
                let p_g = (g_dim > 0).then(|| d.z.transpose() * &m * &d.z);
                let res_grad = params.residual.half_trace_gradient(&m, &d.markers, &d.occasions);
                Second { quad, p_g, res_grad }
            })
            .collect();

        let quad: f64 = second.iter().map(|s| s.quad).sum();
        let negloglik = if reml {
            0.5 * ((self.n_obs as f64 - p as f64) * LN_2PI + logdet + quad + logdet_a)
        } else {
            0.5 * (self.n_obs as f64 * LN_2PI + logdet + quad)
        };

        let gradient = with_gradient.then(|| {
            let mut grad = Vec::with_capacity(self.n_params());
            if let Some(g) = &params.g {
                let mut pg = DMatrix::zeros(g_dim, g_dim);
                for s in &second {
                    if let Some(x) = &s.p_g {
                        pg += x;
                    }
                }
                pg = (&pg + pg.transpose()) * 0.5;
                grad.extend(g.half_trace_gradient(&pg));
            }
            let mut rg = vec![0.0; n_res];
            for s in &second {
                for (acc, v) in rg.iter_mut().zip(&s.res_grad) {
                    *acc += v;
                }
            }
            grad.extend(rg);
            DVector::from_vec(grad)
        });

        Ok(Evaluation {
            negloglik,
            beta,
            beta_cov,
            gradient,
        })
    }
}

/// Profiled negative (restricted) log-likelihood and the GLS fixed effects at `theta`.
pub fn profiled_negloglik(theta: &[f64], designs: &[SubjectDesign], spec: &ModelSpec) -> Result<(f64, DVector<f64>)> {
    let e = ProfiledObjective::new(designs, spec)?.value(theta)?;
    Ok((e.negloglik, e.beta))
}

/// Analytic gradient of [`profiled_negloglik`] with respect to `theta`.
pub fn objective_gradient(theta: &[f64], designs: &[SubjectDesign], spec: &ModelSpec) -> Result<DVector<f64>> {
    let e = ProfiledObjective::new(designs, spec)?.value_and_gradient(theta)?;
    Ok(e.gradient.expect("gradient requested"))
}
