//! The four commands. `run_*` functions compute reports; `cmd_*` functions read
//! configs and write files.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::config::{Layout, ModelConfig, RandomEffectsChoice, RunConfig, TruthConfig};
use super::report::{
    recovery_text, run_text, ComparisonInput, DataSummary, FitRunReport, ModelOutcome, NullLrtCheck,
    RecoveryReport, RecoveryRow,
};
use crate::data::{baseline_difference, occasion_summary, read_long_csv, read_wide_csv, write_long_csv, StackedDataset};
use crate::error::{Error, Result};
use crate::estimation::{fit, nested_start, FitOptions, FitResult, Method, ModelSpec, RandomEffects};
use crate::inference::{chi2_quantile, ComparisonReport, ModelRow};
use crate::simulate::rng::stream_key;
use crate::simulate::{apply_mar_missingness, simulate, TruthParams};

const TAG_REPLICATE: u64 = 3;
const TAG_REPLICATE_MISSING: u64 = 4;
const TAG_NULL_LRT: u64 = 5;

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// At least one fit did not converge.
    NotConverged,
    /// A recovery check failed.
    CheckFailed,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::CheckFailed => 1,
            Outcome::NotConverged => 3,
        }
    }
}

/// 2 for problems with the input or configuration, 4 otherwise.
pub fn exit_code_for_error(e: &Error) -> u8 {
    match e {
        Error::NotPositiveDefinite { .. } | Error::NearSingular { .. } | Error::DimensionMismatch(_) => 4,
        _ => 2,
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
}

impl Overrides {
    fn model(&self, m: &ModelConfig) -> ModelConfig {
        let mut m = m.clone();
        if let Some(method) = self.method {
            m.method = method;
        }
        m
    }
}

/// Reads the input named by a config, with baseline differencing applied.
pub fn load_dataset(cfg: &RunConfig) -> Result<(StackedDataset, Vec<String>)> {
    let grid = cfg.grid()?;
    let file = File::open(&cfg.input).map_err(|e| Error::Config(format!("{}: {e}", cfg.input.display())))?;
    let data = match cfg.layout {
        Layout::Wide => read_wide_csv(file, &cfg.columns.wide(), grid)?,
        Layout::Long => read_long_csv(file, &cfg.columns.long(), grid)?,
    };
    if cfg.baseline_differencing {
        Ok(baseline_difference(&data))
    } else {
        Ok((data, Vec::new()))
    }
}

fn fit_model(data: &StackedDataset, name: &str, spec: ModelSpec) -> Result<ModelOutcome> {
    info!("fitting {name}");
    match fit(data, &spec, &FitOptions::default()) {
        Ok(f) => {
            if !f.converged {
                warn!("{name} did not converge: {}", f.message);
            }
            Ok(ModelOutcome {
                name: name.into(),
                spec,
                fit: Some(f),
                error: None,
            })
        }
        // numerical breakdown is reported per model; input problems abort the run
        Err(e @ (Error::NotPositiveDefinite { .. } | Error::NearSingular { .. })) => {
            warn!("{name} failed: {e}");
            Ok(ModelOutcome {
                name: name.into(),
                spec,
                fit: None,
                error: Some(e.to_string()),
            })
        }
        Err(e) => Err(e),
    }
}

pub fn model_row(name: &str, f: &FitResult, spec: &ModelSpec) -> ModelRow {
    ModelRow::new(
        name,
        f.log_likelihood,
        f.n_params,
        f.method,
        spec.fixed_effect_names(),
        f.converged,
    )
}

/// Fits every model of `cfg` to `data`, in order.
pub fn run_fit(cfg: &RunConfig, data: &StackedDataset, excluded: Vec<String>) -> Result<FitRunReport> {
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let design = cfg.design_spec()?;
    let models = cfg
        .models
        .iter()
        .map(|m| fit_model(data, &m.name, m.spec(&design)))
        .collect::<Result<Vec<_>>>()?;
    let input = comparison_input(cfg, &models);
    let comparison = ComparisonReport::build(input.models, &input.lrt)?;
    Ok(FitRunReport {
        data: DataSummary {
            n_subjects: data.n_subjects(),
            n_records: data.n_records(),
            baseline_differencing: cfg.baseline_differencing,
            excluded_subjects: excluded,
            occasions: occasion_summary(data),
        },
        models,
        comparison,
    })
}

/// Rows of the fitted models and the declared pairs whose models both fitted.
pub fn comparison_input(cfg: &RunConfig, models: &[ModelOutcome]) -> ComparisonInput {
    let rows: Vec<ModelRow> = models
        .iter()
        .filter_map(|m| m.fit.as_ref().map(|f| model_row(&m.name, f, &m.spec)))
        .collect();
    let lrt = cfg
        .lrt
        .iter()
        .filter(|p| {
            [&p.null, &p.alternative]
                .iter()
                .all(|n| rows.iter().any(|r| &r.name == *n))
        })
        .cloned()
        .collect();
    ComparisonInput { models: rows, lrt }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `report.txt`, `report.json` and `summary.json` (the input format of
/// `compare`) into the configured output directory.
pub fn cmd_fit(config: &Path, overrides: Overrides) -> Result<(Outcome, String)> {
    let mut cfg = RunConfig::load(config)?;
    cfg.models = cfg.models.iter().map(|m| overrides.model(m)).collect();
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    let (data, excluded) = load_dataset(&cfg)?;
    let report = run_fit(&cfg, &data, excluded)?;
    let text = run_text(&report);
    create_dir(&cfg.output)?;
    write_text(&cfg.output.join("report.txt"), &text)?;
    write_json(&cfg.output.join("report.json"), &report)?;
    write_json(&cfg.output.join("summary.json"), &comparison_input(&cfg, &report.models))?;
    let outcome = if report.models.iter().all(ModelOutcome::converged) {
        Outcome::Success
    } else {
        Outcome::NotConverged
    };
    Ok((outcome, text))
}

/// Merges comparison inputs and builds the AIC table and LRTs.
pub fn run_compare(inputs: Vec<ComparisonInput>) -> Result<ComparisonReport> {
    let mut all = ComparisonInput::default();
    for i in inputs {
        all.models.extend(i.models);
        all.lrt.extend(i.lrt);
    }
    if all.models.is_empty() {
        return Err(Error::invalid("no models to compare"));
    }
    ComparisonReport::build(all.models, &all.lrt)
}

/// Reads `summary.json` files, optionally writes `comparison.txt` and
/// `comparison.json` into `output`.
pub fn cmd_compare(summaries: &[PathBuf], output: Option<&Path>) -> Result<(Outcome, String)> {
    let inputs = summaries
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<ComparisonInput>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = run_compare(inputs)?;
    let text = report.to_text();
    if let Some(dir) = output {
        create_dir(dir)?;
        write_text(&dir.join("comparison.txt"), &text)?;
        write_json(&dir.join("comparison.json"), &report)?;
    }
    let outcome = if report.models.iter().all(|m| m.converged) {
        Outcome::Success
    } else {
        Outcome::NotConverged
    };
    Ok((outcome, text))
}

/// One simulated dataset per replicate, with the configured missingness.
pub fn replicate_dataset(cfg: &TruthConfig, truth: &TruthParams, replicate: u64) -> Result<StackedDataset> {
    let mut t = truth.clone();
    t.seed = stream_key(cfg.seed, replicate, TAG_REPLICATE);
    let data = simulate(&t, &cfg.design_spec()?)?;
    match cfg.missing {
        Some(p) => apply_mar_missingness(&data, p, stream_key(cfg.seed, replicate, TAG_REPLICATE_MISSING)),
        None => Ok(data),
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Estimates (fixed effects, then covariance parameters) by name.
pub fn estimates(f: &FitResult) -> Vec<(String, f64)> {
    f.fixed_effects
        .iter()
        .map(|e| (e.name.clone(), e.estimate))
        .chain(f.covariance.iter().map(|c| (c.name.clone(), c.estimate)))
        .collect()
}

/// Per-parameter bias and Monte-Carlo standard error over replicate estimates.
pub fn recovery_rows(truth: &[(String, f64)], replicate_estimates: &[Vec<(String, f64)>]) -> Result<Vec<RecoveryRow>> {
    if replicate_estimates.len() < 2 {
        return Err(Error::invalid("recovery needs at least two converged replicates"));
    }
    truth
        .iter()
        .map(|(name, t)| {
            let values = replicate_estimates
                .iter()
                .map(|est| {
                    est.iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| Error::invalid(format!("fit does not report {name}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, sd) = mean_sd(&values);
            let mc_se = sd / (values.len() as f64).sqrt();
            let bias = mean - t;
            Ok(RecoveryRow {
                name: name.clone(),
                truth: *t,
                mean,
                bias,
                sd,
                mc_se,
                pass: bias.abs() <= 3.0 * mc_se,
            })
        })
        .collect()
}

/// LRT of the block-diagonal against the full random-slopes `G` (both by ML) on
/// data drawn without cross-marker random-effect covariance.
pub fn null_lrt_check(cfg: &TruthConfig, truth: &TruthParams, replicates: usize) -> Result<NullLrtCheck> {
    let design = cfg.design_spec()?;
    let mut t = truth.clone();
    if t.g.is_none() {
        t = TruthParams::slopes_preset(t.n_subjects, t.seed);
    }
    let q1 = design.marker_columns(crate::data::Marker::M1);
    if let Some(g) = t.g.as_mut() {
        let n = g.len();
        for i in 0..n {
            for j in 0..n {
                if (i < q1) != (j < q1) {
                    g[i][j] = 0.0;
                }
            }
        }
    }
    let residual = crate::covariance::ResidualKind::GroupedDiagonal;
    t.serial = None;
    let masked = ModelSpec::new(design.clone(), RandomEffects::Slopes { independent: true }, residual, Method::Ml);
    let full = ModelSpec::new(design.clone(), RandomEffects::Slopes { independent: false }, residual, Method::Ml);
    let df = full.n_covariance_params() - masked.n_covariance_params();
    let mut statistics = Vec::with_capacity(replicates);
    for r in 0..replicates {
        t.seed = stream_key(cfg.seed, r as u64, TAG_NULL_LRT);
        let data = simulate(&t, &design)?;
        let fm = fit(&data, &masked, &FitOptions::default())?;
        let opts = FitOptions {
            start: Some(nested_start(&fm, &full)?),
            standard_errors: false,
            ..Default::default()
        };
        let ff = fit(&data, &full, &opts)?;
        statistics.push((2.0 * (ff.log_likelihood - fm.log_likelihood)).max(0.0));
    }
    let med = median(&statistics);
    let reference_median = chi2_quantile(0.5, df as f64);
    // asymptotic SE of a sample median: sqrt(pi/2) sd / sqrt(n), doubled
    let slack = 2.0 * (std::f64::consts::PI / 2.0).sqrt() * (2.0 * df as f64).sqrt() / (replicates as f64).sqrt();
    Ok(NullLrtCheck {
        replicates,
        df,
        statistics,
        median: med,
        reference_median,
        slack,
        pass: med <= reference_median + slack,
    })
}

/// Simulate, fit and summarize bias against the truth.
pub fn run_recover(cfg: &TruthConfig, overrides: Overrides) -> Result<RecoveryReport> {
    let truth = cfg.truth_params()?;
    let model = overrides.model(&cfg.model_config()?);
    let spec = model.spec(&cfg.design_spec()?);
    let truth_values = truth.natural_values(&spec)?;
    let mut converged = Vec::new();
    for r in 0..cfg.replicates {
        let data = replicate_dataset(cfg, &truth, r as u64)?;
        let f = fit(
            &data,
            &spec,
            &FitOptions {
                standard_errors: false,
                ..Default::default()
            },
        )?;
        info!("replicate {r}: logL {} converged {}", f.log_likelihood, f.converged);
        if f.converged {
            converged.push(estimates(&f));
        } else {
            warn!("replicate {r} did not converge: {}", f.message);
        }
    }
    let parameters = recovery_rows(&truth_values, &converged)?;
    let null_lrt = match cfg.null_lrt_replicates {
        0 => None,
        k => Some(null_lrt_check(cfg, &truth, k)?),
    };
    let pass = parameters.iter().all(|p| p.pass) && null_lrt.as_ref().is_none_or(|n| n.pass);
    Ok(RecoveryReport {
        model: model.name.clone(),
        spec,
        n_subjects: truth.n_subjects,
        replicates: cfg.replicates,
        converged: converged.len(),
        parameters,
        null_lrt,
        pass,
    })
}

/// Writes `recovery.txt` and `recovery.json` into the configured output directory.
pub fn cmd_recover(config: &Path, overrides: Overrides) -> Result<(Outcome, String)> {
    let mut cfg = TruthConfig::load(config)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    let report = run_recover(&cfg, overrides)?;
    let text = recovery_text(&report);
    create_dir(&cfg.output)?;
    write_text(&cfg.output.join("recovery.txt"), &text)?;
    write_json(&cfg.output.join("recovery.json"), &report)?;
    let outcome = if report.converged < report.replicates {
        Outcome::NotConverged
    } else if report.pass {
        Outcome::Success
    } else {
        Outcome::CheckFailed
    };
    Ok((outcome, text))
}

/// Path of the truth sidecar written next to a simulated CSV.
pub fn truth_sidecar(csv: &Path) -> PathBuf {
    csv.with_extension("truth.json")
}

/// Writes the simulated long CSV and its truth sidecar.
pub fn cmd_simulate(config: &Path, overrides: Overrides) -> Result<(Outcome, String)> {
    let mut cfg = TruthConfig::load(config)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    let truth = cfg.truth_params()?;
    let mut data = simulate(&truth, &cfg.design_spec()?)?;
    if let Some(p) = cfg.missing {
        data = apply_mar_missingness(&data, p, stream_key(cfg.seed, 0, TAG_REPLICATE_MISSING))?;
    }
    if let Some(dir) = cfg.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let file = File::create(&cfg.output)?;
    write_long_csv(BufWriter::new(file), &data)?;
    #[derive(serde::Serialize)]
    struct Sidecar<'a> {
        truth: &'a TruthParams,
        design: crate::data::DesignSpec,
        missing: Option<crate::simulate::MissingPattern>,
        n_records: usize,
    }
    let sidecar = Sidecar {
        truth: &truth,
        design: cfg.design_spec()?,
        missing: cfg.missing,
        n_records: data.n_records(),
    };
    write_json(&truth_sidecar(&cfg.output), &sidecar)?;
    let text = format!(
        "wrote {} records for {} subjects to {}\n",
        data.n_records(),
        data.n_subjects(),
        cfg.output.display()
    );
    Ok((Outcome::Success, text))
}

/// The model list used when a config asks for the four standard comparisons:
/// the two random-slopes models (block-diagonal and full `G`) and the two AR(1)
/// models (independent and Kronecker serial processes).
pub fn standard_models(method: Method) -> Vec<ModelConfig> {
    use crate::covariance::ResidualKind::*;
    let m = |name: &str, re, independent, residual| ModelConfig {
        name: name.into(),
        random_effects: re,
        independent,
        residual,
        method,
    };
    vec![
        m("univariate slopes", RandomEffectsChoice::Slopes, true, GroupedDiagonal),
        m("bivariate slopes", RandomEffectsChoice::Slopes, false, GroupedDiagonal),
        m("univariate AR(1)", RandomEffectsChoice::None, false, IndependentAr1PlusError),
        m("bivariate AR(1)", RandomEffectsChoice::None, false, KroneckerAr1PlusError),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovery_rows_flag_large_bias() {
        let truth = vec![("a".to_string(), 1.0)];
        let est = |v: f64| vec![("a".to_string(), v)];
        let ok = recovery_rows(&truth, &[est(0.9), est(1.1), est(1.0), est(1.05)]).unwrap();
        assert!(ok[0].pass);
        let bad = recovery_rows(&truth, &[est(1.9), est(2.1), est(2.0), est(2.05)]).unwrap();
        assert!(!bad[0].pass);
        assert!(recovery_rows(&truth, &[est(1.0)]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Outcome::Success.exit_code(), 0);
        assert_eq!(Outcome::NotConverged.exit_code(), 3);
        assert_eq!(exit_code_for_error(&Error::Parse { line: 3, message: "x".into() }), 2);
        assert_eq!(exit_code_for_error(&Error::NotPositiveDefinite { subject: "s".into() }), 4);
    }

    #[test]
    fn standard_models_have_reported_parameter_counts() {
        let design = crate::data::DesignSpec::piecewise(4.0);
        let k: Vec<usize> = standard_models(Method::Reml)
            .iter()
            .map(|m| crate::inference::parameter_count(&m.spec(&design)))
            .collect();
        assert_eq!(k, vec![12, 16, 10, 10]);
    }
}
