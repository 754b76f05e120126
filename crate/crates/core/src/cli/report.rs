//! Text and JSON reports. Text prints 6 significant digits; JSON keeps full
//! precision (non-finite numbers become `null`).

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::OccasionSummary;
use crate::estimation::{FitResult, ModelSpec, RandomEffects};
use crate::inference::{format_sig, ComparisonReport, ModelRow, NestedPair};

const DIGITS: usize = 6;

fn g6(x: f64) -> String {
    format_sig(x, DIGITS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_subjects: usize,
    pub n_records: usize,
    pub baseline_differencing: bool,
    /// Subjects dropped by baseline differencing (no occasion-0 value).
    pub excluded_subjects: Vec<String>,
    pub occasions: Vec<OccasionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub name: String,
    pub spec: ModelSpec,
    pub fit: Option<FitResult>,
    /// Set when the fit stopped with an error.
    pub error: Option<String>,
}

impl ModelOutcome {
    pub fn converged(&self) -> bool {
        self.fit.as_ref().is_some_and(|f| f.converged)
    }
}

/// Everything `fit` produces for one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRunReport {
    pub data: DataSummary,
    pub models: Vec<ModelOutcome>,
    pub comparison: ComparisonReport,
}

/// Input of `compare`: fitted-model rows and the nested pairs to test.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonInput {
    pub models: Vec<ModelRow>,
    #[serde(default)]
    pub lrt: Vec<NestedPair>,
}

fn random_effects_label(re: RandomEffects) -> &'static str {
    match re {
        RandomEffects::None => "none",
        RandomEffects::Slopes { independent: false } => "slopes (full G)",
        RandomEffects::Slopes { independent: true } => "slopes (block-diagonal G)",
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn table(s: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |s: &mut String, cells: &[&str]| {
        let mut out = String::from("  ");
        for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
            if i == 0 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "  {c:>w$}");
            }
        }
        let _ = writeln!(s, "{}", out.trim_end());
    };
    line(s, header);
    for r in rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        line(s, &cells);
    }
}

fn matrix(s: &mut String, names: &[String], m: &[Vec<f64>]) {
    let mut header = vec![""];
    header.extend(names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = names
        .iter()
        .zip(m)
        .map(|(n, row)| std::iter::once(n.clone()).chain(row.iter().map(|&v| g6(v))).collect())
        .collect();
    table(s, &header, &rows);
}

pub fn occasion_table(summary: &[OccasionSummary]) -> String {
    let mut s = String::new();
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|o| {
            vec![
                o.marker.to_string(),
                o.occasion.to_string(),
                g6(o.time),
                o.n.to_string(),
                g6(o.mean),
                g6(o.sd),
            ]
        })
        .collect();
    table(&mut s, &["Marker", "Occasion", "Time", "N", "Mean", "SD"], &rows);
    s
}

pub fn fit_text(f: &FitResult) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "  subjects {}, observations {}, parameters {}",
        f.n_subjects, f.n_observations, f.n_params
    );
    let _ = writeln!(
        s,
        "  log likelihood {}, -2 log likelihood {}, AIC {}",
        g6(f.log_likelihood),
        g6(-2.0 * f.log_likelihood),
        g6(f.aic)
    );
    let _ = writeln!(
        s,
        "  converged: {} ({}; {} iterations, gradient norm {}); Hessian positive definite: {}",
        yes_no(f.converged),
        f.message,
        f.iterations,
        g6(f.gradient_norm),
        yes_no(f.hessian_positive_definite)
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "  Fixed effects");
    let rows: Vec<Vec<String>> = f
        .fixed_effects
        .iter()
        .map(|e| vec![e.name.clone(), g6(e.estimate), g6(e.se), g6(e.z), g6(e.p_value)])
        .collect();
    table(&mut s, &["Effect", "Estimate", "SE", "z", "p"], &rows);
    let _ = writeln!(s);
    let _ = writeln!(s, "  Covariance parameters");
    let rows: Vec<Vec<String>> = f
        .covariance
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                g6(c.estimate),
                g6(c.se),
                g6(c.ci_lower),
                g6(c.ci_upper),
                c.interval.clone(),
            ]
        })
        .collect();
    table(&mut s, &["Parameter", "Estimate", "SE", "Lower", "Upper", "Interval"], &rows);
    if let (Some(g), Some(gc)) = (&f.g, &f.g_correlation) {
        let _ = writeln!(s);
        let _ = writeln!(s, "  G");
        matrix(&mut s, &f.random_effect_names, g);
        let _ = writeln!(s);
        let _ = writeln!(s, "  G correlation");
        matrix(&mut s, &f.random_effect_names, gc);
    }
    if !f.warnings.is_empty() {
        let _ = writeln!(s);
        for w in &f.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
    }
    s
}

pub fn run_text(r: &FitRunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Data: {} subjects, {} records{}",
        r.data.n_subjects,
        r.data.n_records,
        if r.data.baseline_differencing {
            " (changes from baseline)"
        } else {
            ""
        }
    );
    if !r.data.excluded_subjects.is_empty() {
        let _ = writeln!(
            s,
            "Excluded without a baseline value: {}",
            r.data.excluded_subjects.join(", ")
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Responses by occasion");
    s.push_str(&occasion_table(&r.data.occasions));
    for m in &r.models {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "Model: {} [{}; random effects: {}; residual: {}]",
            m.name,
            m.spec.method.label(),
            random_effects_label(m.spec.random_effects),
            m.spec.residual.label()
        );
        match (&m.fit, &m.error) {
            (Some(f), _) => s.push_str(&fit_text(f)),
            (None, Some(e)) => {
                let _ = writeln!(s, "  fit failed: {e}");
            }
            (None, None) => {}
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Model comparison");
    s.push_str(&r.comparison.to_text());
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Standard deviation of the estimates across replicates.
    pub sd: f64,
    /// Monte-Carlo standard error of the mean estimate, `sd / sqrt(R)`.
    pub mc_se: f64,
    /// `|bias| <= 3 mc_se`.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullLrtCheck {
    pub replicates: usize,
    pub df: usize,
    pub statistics: Vec<f64>,
    pub median: f64,
    pub reference_median: f64,
    /// Allowance for Monte-Carlo error of the sample median.
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub model: String,
    pub spec: ModelSpec,
    pub n_subjects: usize,
    pub replicates: usize,
    pub converged: usize,
    pub parameters: Vec<RecoveryRow>,
    pub null_lrt: Option<NullLrtCheck>,
    pub pass: bool,
}

pub fn recovery_text(r: &RecoveryReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Recovery: model {} [{}; random effects: {}; residual: {}]",
        r.model,
        r.spec.method.label(),
        random_effects_label(r.spec.random_effects),
        r.spec.residual.label()
    );
    let _ = writeln!(
        s,
        "  {} subjects, {} replicates, {} converged",
        r.n_subjects, r.replicates, r.converged
    );
    let rows: Vec<Vec<String>> = r
        .parameters
        .iter()
        .map(|p| {
            vec![
                p.name.clone(),
                g6(p.truth),
                g6(p.mean),
                g6(p.bias),
                g6(p.mc_se),
                if p.pass { "pass".into() } else { "FAIL".into() },
            ]
        })
        .collect();
    table(&mut s, &["Parameter", "Truth", "Mean", "Bias", "MC SE", "|bias| <= 3 MC SE"], &rows);
    if let Some(n) = &r.null_lrt {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "Null LRT (no cross-marker random-effect covariance): {} replicates, median {} vs chi-square({}) median {} + slack {}: {}",
            n.replicates,
            g6(n.median),
            n.df,
            g6(n.reference_median),
            g6(n.slack),
            if n.pass { "pass" } else { "FAIL" }
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Overall: {}", if r.pass { "pass" } else { "FAIL" });
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_alignment() {
        let mut s = String::new();
        table(
            &mut s,
            &["Name", "Value"],
            &[vec!["a".into(), "1".into()], vec!["long name".into(), "-2.5".into()]],
        );
        assert_eq!(s, "  Name       Value\n  a              1\n  long name   -2.5\n");
    }
}
