use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use bivlmm::cli::{
    cmd_fit, cmd_simulate, exit_code_for_error, run_recover, ComparisonInput, FitRunReport, Outcome, Overrides,
    TruthConfig,
};
use bivlmm::data::{read_long_csv, LongColumns, OccasionGrid};
use bivlmm::inference::format_sig;
use bivlmm::Error;

const BIN: &str = env!("CARGO_BIN_EXE_bivlmm");

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn simulate_into(dir: &Path, preset: &str, n: usize, seed: u64) {
    let cfg = write(
        dir,
        "sim.toml",
        &format!("preset = \"{preset}\"\nn_subjects = {n}\nseed = {seed}\noutput = \"data.csv\"\n"),
    );
    let (outcome, _) = cmd_simulate(&cfg, Overrides::default()).unwrap();
    assert_eq!(outcome, Outcome::Success);
}

const MODELS: &str = r#"
[[model]]
name = "univariate slopes"
random_effects = "slopes"
independent = true
residual = "grouped_diagonal"

[[model]]
name = "bivariate slopes"
random_effects = "slopes"
residual = "grouped_diagonal"

[[model]]
name = "univariate AR(1)"
residual = "independent_ar1_plus_error"

[[model]]
name = "bivariate AR(1)"
residual = "kronecker_ar1_plus_error"

[[lrt]]
null = "univariate slopes"
alternative = "bivariate slopes"
"#;

fn fit_config(dir: &Path, output: &str, extra_models: &str) -> std::path::PathBuf {
    write(
        dir,
        &format!("{output}.toml"),
        &format!(
            "input = \"data.csv\"\nlayout = \"long\"\noccasion_spacing = 4.0\noutput = \"{output}\"\n{MODELS}{extra_models}"
        ),
    )
}

#[test]
fn fit_writes_reports_with_exact_aic_identity() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), "ar1", 80, 11);
    let cfg = fit_config(dir.path(), "out", "");
    let (outcome, text) = cmd_fit(&cfg, Overrides::default()).unwrap();
    assert_eq!(outcome, Outcome::Success);
    let json: FitRunReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(json.comparison.models.len(), 4);
    for m in &json.comparison.models {
        assert_eq!(m.aic, -2.0 * m.log_likelihood + 2.0 * m.n_params as f64);
    }
    let k: Vec<usize> = json.comparison.models.iter().map(|m| m.n_params).collect();
    assert_eq!(k, vec![12, 16, 10, 10]);
    assert_eq!(json.comparison.tests[0].df, 4);
    assert_eq!(fs::read_to_string(dir.path().join("out/report.txt")).unwrap(), text);
    let summary: ComparisonInput =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.models.len(), 4);
}

#[test]
fn reports_are_byte_identical_and_cross_parse() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), "slopes", 60, 3);
    let a = fit_config(dir.path(), "a", "");
    let b = fit_config(dir.path(), "b", "");
    cmd_fit(&a, Overrides::default()).unwrap();
    cmd_fit(&b, Overrides::default()).unwrap();
    for f in ["report.txt", "report.json", "summary.json"] {
        let x = fs::read(dir.path().join("a").join(f)).unwrap();
        let y = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }

    let text = fs::read_to_string(dir.path().join("a/report.txt")).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/report.json")).unwrap()).unwrap();
    let sections: Vec<&str> = text.split("\nModel: ").skip(1).collect();
    let models = json["models"].as_array().unwrap();
    assert_eq!(sections.len(), models.len());
    let mut checked = 0;
    for (section, model) in sections.iter().zip(models) {
        let fit = &model["fit"];
        for (list, fields) in [("fixed_effects", &["estimate", "se"][..]), ("covariance", &["estimate", "se"][..])] {
            for item in fit[list].as_array().unwrap() {
                let name = item["name"].as_str().unwrap();
                let line = section
                    .lines()
                    .find(|l| l.trim_start().starts_with(&format!("{name} ")))
                    .unwrap_or_else(|| panic!("no text line for {name}"));
                let cells: Vec<&str> = line.split_whitespace().collect();
                for (i, field) in fields.iter().enumerate() {
                    // non-finite numbers are null in JSON
                    let expected = item[*field].as_f64().map_or("NaN".to_string(), |v| format_sig(v, 6));
                    assert_eq!(cells[1 + i], expected, "{name} {field}");
                    checked += 1;
                }
            }
        }
        let logl = fit["log_likelihood"].as_f64().unwrap();
        assert!(section.contains(&format!("log likelihood {}", format_sig(logl, 6))));
    }
    assert!(checked > 40);
}

#[test]
fn combined_slopes_and_ar1_model_is_reported_either_way() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), "ar1", 40, 5);
    let extra = "\n[[model]]\nname = \"slopes + AR(1)\"\nrandom_effects = \"slopes\"\nresidual = \"kronecker_ar1_plus_error\"\n";
    let cfg = fit_config(dir.path(), "out", extra);
    let (outcome, text) = cmd_fit(&cfg, Overrides::default()).unwrap();
    assert!(matches!(outcome, Outcome::Success | Outcome::NotConverged));
    assert!(text.contains("Model: slopes + AR(1)"));
    assert!(text.contains("slopes + AR(1)       REML"));
}

#[test]
fn method_override_applies_to_every_model() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), "ar1", 30, 5);
    let cfg = fit_config(dir.path(), "out", "");
    let (_, text) = cmd_fit(
        &cfg,
        Overrides {
            method: Some(bivlmm::estimation::Method::Ml),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!text.contains("REML"));
    assert_eq!(text.matches("[ML;").count(), 4);
}

#[test]
fn empty_dataset_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "data.csv", "subject,marker,time,response\n");
    let cfg = fit_config(dir.path(), "out", "");
    let err = cmd_fit(&cfg, Overrides::default()).unwrap_err();
    assert_eq!(exit_code_for_error(&err), 2);
    let status = Command::new(BIN).arg("fit").arg(&cfg).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("empty"));
}

#[test]
fn malformed_csv_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "data.csv",
        "subject,marker,time,response\na,0,4,1.0\na,1,4,2.0\na,0,8,oops\n",
    );
    let cfg = fit_config(dir.path(), "out", "");
    match cmd_fit(&cfg, Overrides::default()).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 4),
        e => panic!("unexpected {e}"),
    }
    let out = Command::new(BIN).arg("fit").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
}

#[test]
fn off_grid_time_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "data.csv", "subject,marker,time,response\na,0,4,1.0\na,0,6,2.0\n");
    let cfg = fit_config(dir.path(), "out", "");
    assert!(matches!(
        cmd_fit(&cfg, Overrides::default()).unwrap_err(),
        Error::GridViolation { .. }
    ));
}

#[test]
fn wide_input_with_baseline_differencing() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("id,month,rna,cd4\n");
    let mut state = 1u64;
    let mut noise = || {
        state = bivlmm::simulate::rng::mix64(state);
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    for s in 0..25 {
        for occ in 0..=4 {
            let t = 4.0 * occ as f64;
            let (t1, t2) = (t.min(4.0), (t - 4.0).max(0.0));
            let rna = 4.5 - 0.5 * t1 + 0.01 * t2 + noise();
            let cd4 = if s == 0 && occ == 0 {
                String::new()
            } else {
                format!("{}", 300.0 + 20.0 * t1 + 5.0 * t2 + 30.0 * noise())
            };
            csv.push_str(&format!("p{s},{t},{rna},{cd4}\n"));
        }
    }
    write(dir.path(), "wide.csv", &csv);
    let cfg = write(
        dir.path(),
        "fit.toml",
        r#"
input = "wide.csv"
layout = "wide"
occasion_spacing = 4.0
baseline_differencing = true
output = "out"

[columns]
subject = "id"
time = "month"
markers = ["rna", "cd4"]

[[model]]
name = "bivariate AR(1)"
residual = "kronecker_ar1_plus_error"
method = "ml"
"#,
    );
    let (_, text) = cmd_fit(&cfg, Overrides::default()).unwrap();
    assert!(text.contains("Data: 24 subjects"));
    assert!(text.contains("Excluded without a baseline value: p0"));
    assert!(text.contains("(changes from baseline)"));
}

#[test]
fn compare_reproduces_the_reported_table() {
    let dir = tempfile::tempdir().unwrap();
    let row = |name: &str, logl: f64, k: usize| {
        serde_json::json!({
            "name": name, "log_likelihood": logl, "n_params": k, "aic": 0.0,
            "method": "reml", "fixed_effects": ["M1:T1", "M1:T2", "M2:T1", "M2:T2"], "converged": true
        })
    };
    let summary = serde_json::json!({
        "models": [
            row("univariate slopes", -25307.0, 12),
            row("bivariate slopes", -25194.0, 16),
            row("univariate AR(1)", -25313.0, 10),
            row("bivariate AR(1)", -25183.0, 10),
        ],
        "lrt": [{"null": "univariate slopes", "alternative": "bivariate slopes"}]
    });
    let p = write(dir.path(), "summary.json", &summary.to_string());
    let out = Command::new(BIN)
        .args(["compare", p.to_str().unwrap(), "--output"])
        .arg(dir.path().join("cmp"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for aic in ["50638", "50420", "50646", "50386"] {
        assert!(text.contains(aic), "{aic} missing from\n{text}");
    }
    assert!(text.contains("univariate slopes vs bivariate slopes: statistic = 226, df = 4"));
    assert!(dir.path().join("cmp/comparison.json").exists());

    // REML fits with different fixed effects cannot be tested against each other
    let mut bad = summary.clone();
    bad["models"][1]["fixed_effects"] = serde_json::json!(["M1:T1"]);
    let p = write(dir.path(), "bad.json", &bad.to_string());
    let out = Command::new(BIN).args(["compare", p.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ML"));
}

#[test]
fn simulate_writes_csv_and_truth_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sim.toml",
        "preset = \"ar1\"\nn_subjects = 15\nseed = 9\noutput = \"sim/data.csv\"\nmissing = { type = \"dropout\", rate = 0.1 }\n",
    );
    let out = Command::new(BIN).arg("simulate").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read(dir.path().join("sim/data.csv")).unwrap();
    let data = read_long_csv(csv.as_slice(), &LongColumns::default(), OccasionGrid::new(4.0, 0.0).unwrap()).unwrap();
    // subjects dropping out at the first occasion leave no records
    assert!(data.n_subjects() <= 15 && data.n_subjects() >= 10);
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sim/data.truth.json")).unwrap()).unwrap();
    assert_eq!(side["truth"]["seed"], 9);
    assert_eq!(side["n_records"].as_u64().unwrap() as usize, data.n_records());
    // --seed overrides the config
    let out2 = Command::new(BIN).args(["--seed", "10", "simulate"]).arg(&cfg).output().unwrap();
    assert_eq!(out2.status.code(), Some(0));
    assert_ne!(fs::read(dir.path().join("sim/data.csv")).unwrap(), csv);
}

#[test]
fn recover_smoke_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: TruthConfig = toml::from_str(&format!(
        "preset = \"ar1\"\nn_subjects = 10\nseed = 1\nreplicates = 2\noutput = \"{}\"\n",
        dir.path().join("rec").display()
    ))
    .unwrap();
    let start = Instant::now();
    let r = run_recover(&cfg, Overrides::default()).unwrap_or_else(|e| panic!("{e}"));
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert_eq!(r.replicates, 2);
    assert_eq!(r.parameters.len(), 10);
}

#[test]
fn unknown_config_key_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "input = \"x.csv\"\nlayout = \"long\"\nocasion_spacing = 4\n");
    let out = Command::new(BIN).arg("fit").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
