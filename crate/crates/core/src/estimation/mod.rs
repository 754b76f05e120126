//! Profiled (RE)ML estimation of the covariance parameters.
//!
//! Fixed effects are profiled out by generalized least squares, so the optimizer
//! works on the unconstrained covariance coordinates only. The coordinate vector is
//! laid out as `[G coordinates][residual coordinates]`; see
//! [`RandomEffectsCov`](crate::covariance::RandomEffectsCov) and
//! [`ResidualStructure::from_theta`](crate::covariance::ResidualStructure::from_theta).

mod fit;
mod likelihood;
pub mod optimize;

pub use fit::{
    default_start, fit, fit_designs, nested_start, CovarianceEstimate, FitOptions, FitResult, FixedEffect,
};
pub use likelihood::{objective_gradient, profiled_negloglik, Evaluation, ProfiledObjective};

use serde::{Deserialize, Serialize};

use crate::covariance::{RandomEffectsCov, ResidualKind, ResidualStructure};
use crate::data::{fixed_effect_names, DesignSpec, Marker};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ml,
    Reml,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ml => "ML",
            Method::Reml => "REML",
        }
    }
}

/// Random effects on every design column. `independent` zeroes the cross-marker
/// block of `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffects {
    None,
    Slopes { independent: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub design: DesignSpec,
    pub random_effects: RandomEffects,
    pub residual: ResidualKind,
    pub method: Method,
}

impl ModelSpec {
    pub fn new(design: DesignSpec, random_effects: RandomEffects, residual: ResidualKind, method: Method) -> Self {
        Self {
            design,
            random_effects,
            residual,
            method,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.design.validate()
    }

    /// Random-effect columns per marker (random effects use every design column).
    pub fn marker_dims(&self) -> [usize; 2] {
        [
            self.design.marker_columns(Marker::M1),
            self.design.marker_columns(Marker::M2),
        ]
    }

    pub fn n_g_params(&self) -> usize {
        match self.random_effects {
            RandomEffects::None => 0,
            RandomEffects::Slopes { independent } => RandomEffectsCov::n_params(self.marker_dims(), independent),
        }
    }

    pub fn n_covariance_params(&self) -> usize {
        self.n_g_params() + self.residual.n_params()
    }

    pub fn fixed_effect_names(&self) -> Vec<String> {
        fixed_effect_names(&self.design)
    }

    /// Same model with the two markers exchanged.
    pub fn swapped(&self) -> Self {
        let mut s = self.clone();
        s.design.terms.swap(0, 1);
        s
    }
}

/// Covariance parameters on the natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceParams {
    pub g: Option<RandomEffectsCov>,
    pub residual: ResidualStructure,
}

impl CovarianceParams {
    pub fn from_theta(spec: &ModelSpec, theta: &[f64]) -> Result<Self> {
        let ng = spec.n_g_params();
        if theta.len() != spec.n_covariance_params() {
            return Err(Error::invalid(format!(
                "model needs {} covariance coordinates, got {}",
                spec.n_covariance_params(),
                theta.len()
            )));
        }
        let g = match spec.random_effects {
            RandomEffects::None => None,
            RandomEffects::Slopes { independent } => Some(RandomEffectsCov::from_theta(
                &theta[..ng],
                spec.marker_dims(),
                independent,
            )?),
        };
        Ok(Self {
            g,
            residual: ResidualStructure::from_theta(spec.residual, &theta[ng..])?,
        })
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.g.as_ref().map(|g| g.theta().to_vec()).unwrap_or_default();
        t.extend(self.residual.theta());
        t
    }
}

/// How a natural-scale parameter is bounded; selects its interval transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScale {
    Variance,
    Covariance,
    Correlation,
}

/// Natural-scale parameter: name, value, scale and the marker it belongs to
/// (`None` for cross-marker covariances).
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParam {
    pub name: String,
    pub value: f64,
    pub scale: ParamScale,
    pub marker: Option<Marker>,
}

/// Natural-scale parameters in reporting order: free `G` entries, serial
/// parameters, error variances.
pub fn natural_params(spec: &ModelSpec, params: &CovarianceParams) -> Vec<NaturalParam> {
    let mut out = Vec::new();
    if let Some(g) = &params.g {
        let names = spec.fixed_effect_names();
        let q1 = spec.marker_dims()[0];
        let marker_of = |i: usize| if i < q1 { Marker::M1 } else { Marker::M2 };
        for (a, b) in g.free_entries() {
            out.push(NaturalParam {
                name: format!("G[{},{}]", names[a], names[b]),
                value: g.g()[(a, b)],
                scale: if a == b { ParamScale::Variance } else { ParamScale::Covariance },
                marker: (marker_of(a) == marker_of(b)).then(|| marker_of(a)),
            });
        }
    }
    let mut push = |name: &str, value: f64, scale: ParamScale, marker: Option<Marker>| {
        out.push(NaturalParam {
            name: name.to_string(),
            value,
            scale,
            marker,
        })
    };
    match &params.residual {
        ResidualStructure::KroneckerAr1PlusError(k, _) | ResidualStructure::KroneckerAr1Only(k) => {
            push("sigma2_w1", k.c()[(0, 0)], ParamScale::Variance, Some(Marker::M1));
            push("sigma_w1w2", k.c()[(0, 1)], ParamScale::Covariance, None);
            push("sigma2_w2", k.c()[(1, 1)], ParamScale::Variance, Some(Marker::M2));
            push("rho", k.rho(), ParamScale::Correlation, None);
        }
        ResidualStructure::IndependentAr1PlusError(ar, _) => {
            push("sigma2_w1", ar[0].sigma2, ParamScale::Variance, Some(Marker::M1));
            push("rho1", ar[0].rho, ParamScale::Correlation, Some(Marker::M1));
            push("sigma2_w2", ar[1].sigma2, ParamScale::Variance, Some(Marker::M2));
            push("rho2", ar[1].rho, ParamScale::Correlation, Some(Marker::M2));
        }
        ResidualStructure::GroupedDiagonal(_) => {}
    }
    if let Some(e) = params.residual.error() {
        push("sigma2_eps1", e.sigma2[0], ParamScale::Variance, Some(Marker::M1));
        push("sigma2_eps2", e.sigma2[1], ParamScale::Variance, Some(Marker::M2));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_param_counts() {
        let d = DesignSpec::piecewise(4.0);
        let full = ModelSpec::new(d.clone(), RandomEffects::Slopes { independent: false }, ResidualKind::GroupedDiagonal, Method::Reml);
        assert_eq!(full.n_covariance_params(), 12);
        let masked = ModelSpec::new(d.clone(), RandomEffects::Slopes { independent: true }, ResidualKind::GroupedDiagonal, Method::Reml);
        assert_eq!(masked.n_covariance_params(), 8);
        let ar = ModelSpec::new(d, RandomEffects::None, ResidualKind::KroneckerAr1PlusError, Method::Reml);
        assert_eq!(ar.n_covariance_params(), 6);
    }

    #[test]
    fn theta_round_trip_through_natural_params() {
        let spec = ModelSpec::new(
            DesignSpec::piecewise(4.0),
            RandomEffects::Slopes { independent: false },
            ResidualKind::KroneckerAr1PlusError,
            Method::Ml,
        );
        let theta: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 * 0.2 - 0.4).collect();
        let p = CovarianceParams::from_theta(&spec, &theta).unwrap();
        let back = p.theta();
        for (a, b) in theta.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
        let nat = natural_params(&spec, &p);
        assert_eq!(nat.len(), 16);
        assert_eq!(nat[0].name, "G[M1:T1,M1:T1]");
        assert_eq!(nat[10].name, "sigma2_w1");
        assert_eq!(nat[15].name, "sigma2_eps2");
    }
}
