use std::collections::HashSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{aic, likelihood_ratio_test};
use crate::error::{Error, Result};
use crate::estimation::Method;

/// `x` with `digits` significant digits, `%g` style.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let digits = digits.max(1);
    let exp = x.abs().log10().floor() as i32;
    if exp < -4 || exp >= digits as i32 {
        let s = format!("{:.*e}", digits - 1, x);
        let (mantissa, e) = s.split_once('e').expect("exponent");
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{mantissa}e{e}")
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub name: String,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub aic: f64,
    pub method: Method,
    /// Fixed-effect column names; LRTs under REML need identical lists.
    pub fixed_effects: Vec<String>,
    pub converged: bool,
}

impl ModelRow {
    pub fn new(
        name: impl Into<String>,
        log_likelihood: f64,
        n_params: usize,
        method: Method,
        fixed_effects: Vec<String>,
        converged: bool,
    ) -> Self {
        Self {
            name: name.into(),
            log_likelihood,
            n_params,
            aic: aic(log_likelihood, n_params),
            method,
            fixed_effects,
            converged,
        }
    }
}

/// Declares `null` as a submodel of `alternative`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedPair {
    pub null: String,
    pub alternative: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtRow {
    pub null: String,
    pub alternative: String,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// AIC table plus likelihood-ratio tests for the declared nested pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub models: Vec<ModelRow>,
    pub tests: Vec<LrtRow>,
}

impl ComparisonReport {
    pub fn build(models: Vec<ModelRow>, pairs: &[NestedPair]) -> Result<Self> {
        let mut seen = HashSet::new();
        for m in &models {
            if !seen.insert(m.name.as_str()) {
                return Err(Error::invalid(format!("duplicate model name {:?}", m.name)));
            }
        }
        let models: Vec<ModelRow> = models
            .into_iter()
            .map(|m| ModelRow {
                aic: aic(m.log_likelihood, m.n_params),
                ..m
            })
            .collect();
        let find = |name: &str| {
            models
                .iter()
                .find(|m| m.name == name)
                .ok_or_else(|| Error::ComparisonRefused(format!("unknown model {name:?}")))
        };
        let mut tests = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let null = find(&pair.null)?;
            let alt = find(&pair.alternative)?;
            if null.method != alt.method {
                return Err(Error::ComparisonRefused(format!(
                    "{} was fitted by {} and {} by {}; both models must use the same method",
                    null.name,
                    null.method.label(),
                    alt.name,
                    alt.method.label()
                )));
            }
            if null.method == Method::Reml && null.fixed_effects != alt.fixed_effects {
                return Err(Error::ComparisonRefused(format!(
                    "{} and {} have different fixed effects; REML likelihoods are not comparable (refit both by ML)",
                    null.name, alt.name
                )));
            }
            if alt.n_params <= null.n_params {
                return Err(Error::ComparisonRefused(format!(
                    "{} ({} parameters) cannot nest {} ({} parameters)",
                    alt.name, alt.n_params, null.name, null.n_params
                )));
            }
            let df = alt.n_params - null.n_params;
            let r = likelihood_ratio_test(null.log_likelihood, alt.log_likelihood, df).map_err(|e| match e {
                Error::NestingViolation { .. } => Error::ComparisonRefused(format!(
                    "{} has a lower log-likelihood than its declared submodel {}: {e}",
                    alt.name, null.name
                )),
                other => other,
            })?;
            tests.push(LrtRow {
                null: null.name.clone(),
                alternative: alt.name.clone(),
                statistic: r.statistic,
                df,
                p_value: r.p_value,
            });
        }
        Ok(Self { models, tests })
    }

    /// Plain-text table: model, log-likelihood, number of parameters, AIC.
    pub fn to_text(&self) -> String {
        let width = self
            .models
            .iter()
            .map(|m| m.name.len())
            .chain(std::iter::once(5))
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>6}  {:>16}  {:>17}  {:>14}  {:>9}",
            "Model", "Method", "Log Likelihood", "No. of parameters", "AIC", "Converged"
        );
        for m in &self.models {
            let _ = writeln!(
                s,
                "{:<width$}  {:>6}  {:>16}  {:>17}  {:>14}  {:>9}",
                m.name,
                m.method.label(),
                format_sig(m.log_likelihood, 6),
                m.n_params,
                format_sig(m.aic, 6),
                if m.converged { "yes" } else { "no" }
            );
        }
        let _ = writeln!(s, "AIC = (-2 log likelihood) + 2 (No. of parameters)");
        if !self.tests.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "Likelihood-ratio tests");
            for t in &self.tests {
                let _ = writeln!(
                    s,
                    "{} vs {}: statistic = {}, df = {}, p = {}",
                    t.null,
                    t.alternative,
                    format_sig(t.statistic, 6),
                    t.df,
                    format_sig(t.p_value, 6)
                );
            }
        }
        s
    }
}
