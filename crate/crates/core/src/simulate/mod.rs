//! Synthetic bivariate cohorts with known parameters, and ignorable missingness.

pub mod rng;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use rng::CounterRng;

use crate::covariance::{
    GroupedDiagonalError, KroneckerAr1, MarkerAr1, RandomEffectsCov, ResidualKind, ResidualStructure,
};
use crate::data::{DesignSpec, LongRecord, Marker, OccasionGrid, StackedDataset, SubjectDesign, SubjectRecords};
use crate::error::{Error, Result};
use crate::estimation::{natural_params, CovarianceParams, ModelSpec, RandomEffects};

const TAG_SIMULATE: u64 = 1;
const TAG_MISSING: u64 = 2;

/// Serial component of the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SerialTruth {
    Kronecker { c: [[f64; 2]; 2], rho: f64 },
    Independent { sigma2: [f64; 2], rho: [f64; 2] },
}

impl SerialTruth {
    fn cov(&self, k: Marker, j: u32, l: Marker, m: u32) -> f64 {
        let lag = j.abs_diff(m) as i32;
        match self {
            SerialTruth::Kronecker { c, rho } => c[k.index()][l.index()] * rho.powi(lag),
            SerialTruth::Independent { sigma2, rho } => {
                if k == l {
                    sigma2[k.index()] * rho[k.index()].powi(lag)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Ground truth for a simulated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthParams {
    /// Fixed effects in design-column order.
    pub beta: Vec<f64>,
    /// Random-effects covariance (`None` for no random effects).
    pub g: Option<Vec<Vec<f64>>>,
    pub serial: Option<SerialTruth>,
    /// Measurement-error variances; zero is allowed in simulation.
    pub errors: [f64; 2],
    pub n_subjects: usize,
    /// Scheduled occasions, observed for both markers by every subject.
    pub occasions: Vec<u32>,
    pub grid: OccasionGrid,
    pub seed: u64,
}

/// Factor `F` with `F Fᵀ = m` for symmetric positive semi-definite `m`.
fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::invalid("covariance matrix is not positive semi-definite"));
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("G must be square"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl TruthParams {
    /// Autoregressive truth on the scale of the HIV RNA (marker 1) / CD4 (marker 2)
    /// application: `C = [[1.54, -7.00], [-7.00, 195]]`, `ρ = 0.91`, error variances
    /// 0.15 and 77, six visits four months apart, piecewise slopes around month 4.
    pub fn ar1_preset(n_subjects: usize, seed: u64) -> Self {
        Self {
            beta: vec![-0.49, 0.005, 24.0, 5.2],
            g: None,
            serial: Some(SerialTruth::Kronecker {
                c: [[1.54, -7.0], [-7.0, 195.0]],
                rho: 0.91,
            }),
            errors: [0.15, 77.0],
            n_subjects,
            occasions: (1..=6).collect(),
            grid: OccasionGrid {
                spacing: 4.0,
                origin: 0.0,
            },
            seed,
        }
    }

    /// Random-slopes truth with slope SDs (0.3, 0.02, 30, 6) and a slope
    /// correlation matrix of the kind estimated in the application.
    pub fn slopes_preset(n_subjects: usize, seed: u64) -> Self {
        let sd = [0.3, 0.02, 30.0, 6.0];
        let corr = [
            [1.0, -0.10, -0.41, -0.16],
            [-0.10, 1.0, 0.13, -0.60],
            [-0.41, 0.13, 1.0, 0.37],
            [-0.16, -0.60, 0.37, 1.0],
        ];
        let g = (0..4).map(|i| (0..4).map(|j| corr[i][j] * sd[i] * sd[j]).collect()).collect();
        Self {
            beta: vec![-0.49, 0.005, 24.0, 5.2],
            g: Some(g),
            serial: None,
            errors: [0.25, 400.0],
            n_subjects,
            occasions: (1..=6).collect(),
            grid: OccasionGrid {
                spacing: 4.0,
                origin: 0.0,
            },
            seed,
        }
    }

    pub fn validate(&self, design: &DesignSpec) -> Result<()> {
        design.validate()?;
        if self.beta.len() != design.n_fixed() {
            return Err(Error::invalid(format!(
                "beta has {} entries, design has {} columns",
                self.beta.len(),
                design.n_fixed()
            )));
        }
        if let Some(g) = &self.g {
            let m = matrix_from_rows(g)?;
            if m.nrows() != design.n_fixed() {
                return Err(Error::invalid("G dimension must equal the number of design columns"));
            }
            psd_factor(&m)?;
        }
        match &self.serial {
            Some(SerialTruth::Kronecker { c, rho }) => {
                psd_factor(&DMatrix::from_fn(2, 2, |i, j| c[i][j]))?;
                if !(rho.abs() < 1.0) || c[0][1] != c[1][0] {
                    return Err(Error::invalid("serial truth needs symmetric C and |rho| < 1"));
                }
            }
            Some(SerialTruth::Independent { sigma2, rho }) => {
                if sigma2.iter().any(|v| !(*v >= 0.0)) || rho.iter().any(|r| !(r.abs() < 1.0)) {
                    return Err(Error::invalid("serial truth needs variances >= 0 and |rho| < 1"));
                }
            }
            None => {}
        }
        if self.errors.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("error variances must be non-negative"));
        }
        if self.occasions.is_empty() || self.occasions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("occasions must be non-empty and strictly ascending"));
        }
        OccasionGrid::new(self.grid.spacing, self.grid.origin)?;
        Ok(())
    }

    /// Named true values (fixed effects, then covariance parameters) in the order
    /// and naming a fit of `spec` reports them.
    pub fn natural_values(&self, spec: &ModelSpec) -> Result<Vec<(String, f64)>> {
        let mut out: Vec<(String, f64)> = spec.fixed_effect_names().into_iter().zip(self.beta.iter().copied()).collect();
        let g = match spec.random_effects {
            RandomEffects::None => None,
            RandomEffects::Slopes { independent } => {
                let m = self
                    .g
                    .as_ref()
                    .map(|g| matrix_from_rows(g))
                    .transpose()?
                    .ok_or_else(|| Error::invalid("model has random effects but the truth has no G"))?;
                Some(RandomEffectsCov::from_matrix(&m, spec.marker_dims(), independent)?)
            }
        };
        let err = || GroupedDiagonalError::new(self.errors[0], self.errors[1]);
        let residual = match (spec.residual, &self.serial) {
            (ResidualKind::GroupedDiagonal, _) => ResidualStructure::GroupedDiagonal(err()?),
            (ResidualKind::KroneckerAr1PlusError, Some(SerialTruth::Kronecker { c, rho })) => {
                ResidualStructure::KroneckerAr1PlusError(KroneckerAr1::from_entries(c[0][0], c[0][1], c[1][1], *rho)?, err()?)
            }
            (ResidualKind::KroneckerAr1Only, Some(SerialTruth::Kronecker { c, rho })) => {
                ResidualStructure::KroneckerAr1Only(KroneckerAr1::from_entries(c[0][0], c[0][1], c[1][1], *rho)?)
            }
            (ResidualKind::IndependentAr1PlusError, Some(SerialTruth::Independent { sigma2, rho })) => {
                ResidualStructure::IndependentAr1PlusError(
                    [MarkerAr1::new(sigma2[0], rho[0])?, MarkerAr1::new(sigma2[1], rho[1])?],
                    err()?,
                )
            }
            (ResidualKind::IndependentAr1PlusError, Some(SerialTruth::Kronecker { c, rho })) if c[0][1] == 0.0 => {
                ResidualStructure::IndependentAr1PlusError(
                    [MarkerAr1::new(c[0][0], *rho)?, MarkerAr1::new(c[1][1], *rho)?],
                    err()?,
                )
            }
            (kind, _) => {
                return Err(Error::invalid(format!(
                    "truth serial structure does not match residual kind {}",
                    kind.label()
                )))
            }
        };
        let params = CovarianceParams { g, residual };
        out.extend(natural_params(spec, &params).into_iter().map(|p| (p.name, p.value)));
        Ok(out)
    }
}

fn subject_id(i: usize, n: usize) -> String {
    let width = n.to_string().len();
    format!("S{:0width$}", i + 1)
}

/// Draws `Y_i = X_i β + Z_i γ_i + W_i + ε_i` for every subject, each from its own
/// counter stream. Parallel and sequential generation give the same dataset.
pub fn simulate(truth: &TruthParams, design: &DesignSpec) -> Result<StackedDataset> {
    truth.validate(design)?;
    let g_factor = truth.g.as_ref().map(|g| matrix_from_rows(g).and_then(|m| psd_factor(&m))).transpose()?;
    let beta = DVector::from_column_slice(&truth.beta);
    let rows: Vec<(Marker, u32)> = Marker::BOTH
        .iter()
        .flat_map(|&m| truth.occasions.iter().map(move |&o| (m, o)))
        .collect();
    let n = rows.len();
    let serial_factor = truth
        .serial
        .as_ref()
        .map(|s| psd_factor(&DMatrix::from_fn(n, n, |r, c| s.cov(rows[r].0, rows[r].1, rows[c].0, rows[c].1))))
        .transpose()?;
    let err_sd = [truth.errors[0].sqrt(), truth.errors[1].sqrt()];

    let subjects: Vec<SubjectRecords> = (0..truth.n_subjects)
        .into_par_iter()
        .map(|i| {
            let subject = subject_id(i, truth.n_subjects);
            let template = SubjectRecords {
                subject: subject.clone(),
                records: rows
                    .iter()
                    .map(|&(marker, occasion)| LongRecord {
                        subject: subject.clone(),
                        marker,
                        time: truth.grid.time_of(occasion),
                        occasion,
                        response: 0.0,
                    })
                    .collect(),
            };
            let d = SubjectDesign::from_records(&template, design)?;
            let mut rng = CounterRng::for_stream(truth.seed, i as u64, TAG_SIMULATE);
            let mut y = &d.x * &beta;
            if let Some(f) = &g_factor {
                let u = DVector::from_fn(f.ncols(), |_, _| rng.normal());
                y += &d.z * (f * u);
            }
            if let Some(f) = &serial_factor {
                let u = DVector::from_fn(f.ncols(), |_, _| rng.normal());
                y += f * u;
            }
            for (r, &(m, _)) in rows.iter().enumerate() {
                y[r] += err_sd[m.index()] * rng.normal();
            }
            let mut out = template;
            for (rec, v) in out.records.iter_mut().zip(y.iter()) {
                rec.response = *v;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(StackedDataset::from_sorted_parts(subjects, truth.grid))
}

/// Ignorable missingness whose probabilities depend only on the occasion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MissingPattern {
    /// At each occasion, in order, the subject leaves the study with probability
    /// `rate`; that occasion and all later ones are removed for both markers.
    Dropout { rate: f64 },
    /// Each (marker, occasion) record is removed independently with probability `rate`.
    Intermittent { rate: f64 },
}

impl MissingPattern {
    fn rate(&self) -> f64 {
        match *self {
            MissingPattern::Dropout { rate } | MissingPattern::Intermittent { rate } => rate,
        }
    }
}

pub fn apply_mar_missingness(data: &StackedDataset, pattern: MissingPattern, seed: u64) -> Result<StackedDataset> {
    let rate = pattern.rate();
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("missingness rate must lie in [0, 1), got {rate}")));
    }
    let subjects: Vec<SubjectRecords> = data
        .subjects()
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let mut rng = CounterRng::for_stream(seed, i as u64, TAG_MISSING);
            let records: Vec<LongRecord> = match pattern {
                MissingPattern::Intermittent { .. } => s.records.iter().filter(|_| rng.uniform() >= rate).cloned().collect(),
                MissingPattern::Dropout { .. } => {
                    let mut occ: Vec<u32> = s.records.iter().map(|r| r.occasion).collect();
                    occ.sort_unstable();
                    occ.dedup();
                    let cutoff = occ.into_iter().find(|_| rng.uniform() < rate);
                    s.records
                        .iter()
                        .filter(|r| cutoff.is_none_or(|c| r.occasion < c))
                        .cloned()
                        .collect()
                }
            };
            (!records.is_empty()).then(|| SubjectRecords {
                subject: s.subject.clone(),
                records,
            })
        })
        .collect();
    Ok(StackedDataset::from_sorted_parts(subjects, data.grid()))
}
