//! TOML run configurations.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::covariance::ResidualKind;
use crate::data::{DesignSpec, LongColumns, OccasionGrid, TimeTerm, WideColumns};
use crate::error::{Error, Result};
use crate::estimation::{Method, ModelSpec, RandomEffects};
use crate::inference::NestedPair;
use crate::simulate::{MissingPattern, TruthParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One row per (subject, time), one column per marker.
    Wide,
    /// One row per (subject, marker, time).
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnsConfig {
    pub subject: String,
    pub time: String,
    /// Wide layout: the two marker columns.
    pub markers: [String; 2],
    /// Long layout: marker indicator (0/1) and response columns.
    pub marker: String,
    pub response: String,
}

impl Default for ColumnsConfig {
    fn default() -> Self {
        Self {
            subject: "subject".into(),
            time: "time".into(),
            markers: ["m1".into(), "m2".into()],
            marker: "marker".into(),
            response: "response".into(),
        }
    }
}

impl ColumnsConfig {
    pub fn wide(&self) -> WideColumns {
        WideColumns {
            subject: self.subject.clone(),
            markers: self.markers.clone(),
            time: self.time.clone(),
        }
    }

    pub fn long(&self) -> LongColumns {
        LongColumns {
            subject: self.subject.clone(),
            marker: self.marker.clone(),
            time: self.time.clone(),
            response: self.response.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffectsChoice {
    #[default]
    None,
    /// Random effects on every design column.
    Slopes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub random_effects: RandomEffectsChoice,
    /// Zero the cross-marker block of `G` (the two univariate models).
    #[serde(default)]
    pub independent: bool,
    pub residual: ResidualKind,
    #[serde(default = "default_method")]
    pub method: Method,
}

fn default_method() -> Method {
    Method::Reml
}

impl ModelConfig {
    pub fn spec(&self, design: &DesignSpec) -> ModelSpec {
        let re = match self.random_effects {
            RandomEffectsChoice::None => RandomEffects::None,
            RandomEffectsChoice::Slopes => RandomEffects::Slopes {
                independent: self.independent,
            },
        };
        ModelSpec::new(design.clone(), re, self.residual, self.method)
    }
}

fn default_tau() -> f64 {
    4.0
}

/// Design shared by every model of a run; `terms` defaults to `["T1", "T2"]` for
/// both markers.
fn design_spec(tau: f64, include_intercept: bool, terms: &Option<[Vec<TimeTerm>; 2]>) -> Result<DesignSpec> {
    let mut d = DesignSpec::piecewise(tau);
    d.include_intercept = include_intercept;
    if let Some(t) = terms {
        d.terms = t.clone();
    }
    d.validate()?;
    Ok(d)
}

/// Configuration of `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: PathBuf,
    pub layout: Layout,
    #[serde(default)]
    pub columns: ColumnsConfig,
    pub occasion_spacing: f64,
    #[serde(default)]
    pub origin: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub include_intercept: bool,
    #[serde(default)]
    pub terms: Option<[Vec<TimeTerm>; 2]>,
    /// Replace every response by its change from the subject's occasion-0 value.
    #[serde(default)]
    pub baseline_differencing: bool,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "model")]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub lrt: Vec<NestedPair>,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn check_model_names(models: &[ModelConfig]) -> Result<()> {
    let mut seen = HashSet::new();
    for m in models {
        if !seen.insert(m.name.as_str()) {
            return Err(Error::Config(format!("duplicate model name {:?}", m.name)));
        }
    }
    Ok(())
}

impl RunConfig {
    /// Reads a config; relative paths are taken relative to the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c: Self = read_toml(path)?;
        let base = config_dir(path);
        c.input = resolve(&base, &c.input);
        c.output = resolve(&base, &c.output);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("at least one [[model]] is required".into()));
        }
        check_model_names(&self.models)?;
        let names: HashSet<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        for p in &self.lrt {
            for n in [&p.null, &p.alternative] {
                if !names.contains(n.as_str()) {
                    return Err(Error::Config(format!("[[lrt]] refers to unknown model {n:?}")));
                }
            }
        }
        self.grid()?;
        self.design_spec()?;
        Ok(())
    }

    pub fn design_spec(&self) -> Result<DesignSpec> {
        design_spec(self.tau, self.include_intercept, &self.terms)
    }

    pub fn grid(&self) -> Result<OccasionGrid> {
        OccasionGrid::new(self.occasion_spacing, self.origin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Kronecker AR(1) plus measurement error, no random effects.
    Ar1,
    /// Correlated random slopes plus measurement error.
    Slopes,
}

/// Configuration of `simulate` and `recover`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    /// Start from a preset; fields of `truth` are then ignored.
    #[serde(default)]
    pub preset: Option<Preset>,
    /// Explicit truth, used when no preset is given.
    #[serde(default)]
    pub truth: Option<TruthParams>,
    #[serde(default)]
    pub n_subjects: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub include_intercept: bool,
    #[serde(default)]
    pub terms: Option<[Vec<TimeTerm>; 2]>,
    #[serde(default)]
    pub missing: Option<MissingPattern>,
    /// `simulate`: CSV path (truth JSON is written next to it).
    /// `recover`: directory for the reports.
    pub output: PathBuf,
    /// `recover`: number of simulated replicates.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// `recover`: the model fitted to every replicate.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// `recover`: replicates of the masked-versus-full random-slopes LRT under a
    /// truth without cross-marker random-effect covariance (0 = skip).
    #[serde(default)]
    pub null_lrt_replicates: usize,
}

fn default_replicates() -> usize {
    20
}

impl TruthConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut c: Self = read_toml(path)?;
        c.output = resolve(&config_dir(path), &c.output);
        c.truth_params()?;
        Ok(c)
    }

    pub fn design_spec(&self) -> Result<DesignSpec> {
        design_spec(self.tau, self.include_intercept, &self.terms)
    }

    /// Truth with `n_subjects` and `seed` applied.
    pub fn truth_params(&self) -> Result<TruthParams> {
        let n = self.n_subjects.unwrap_or(300);
        let mut t = match (self.preset, &self.truth) {
            (Some(Preset::Ar1), _) => TruthParams::ar1_preset(n, self.seed),
            (Some(Preset::Slopes), _) => TruthParams::slopes_preset(n, self.seed),
            (None, Some(t)) => t.clone(),
            (None, None) => return Err(Error::Config("either preset or [truth] is required".into())),
        };
        if let Some(n) = self.n_subjects {
            t.n_subjects = n;
        }
        t.seed = self.seed;
        t.validate(&self.design_spec()?)?;
        Ok(t)
    }

    /// The fitted model; defaults to the structure the truth was drawn from.
    pub fn model_config(&self) -> Result<ModelConfig> {
        if let Some(m) = &self.model {
            return Ok(m.clone());
        }
        let t = self.truth_params()?;
        let residual = match (&t.serial, t.errors.iter().all(|&e| e > 0.0)) {
            (None, _) => ResidualKind::GroupedDiagonal,
            (Some(crate::simulate::SerialTruth::Kronecker { .. }), true) => ResidualKind::KroneckerAr1PlusError,
            (Some(crate::simulate::SerialTruth::Kronecker { .. }), false) => ResidualKind::KroneckerAr1Only,
            (Some(crate::simulate::SerialTruth::Independent { .. }), _) => ResidualKind::IndependentAr1PlusError,
        };
        Ok(ModelConfig {
            name: "recovery".into(),
            random_effects: if t.g.is_some() {
                RandomEffectsChoice::Slopes
            } else {
                RandomEffectsChoice::None
            },
            independent: false,
            residual,
            method: Method::Reml,
        })
    }
}
