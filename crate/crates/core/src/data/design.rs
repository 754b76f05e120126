use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Marker, StackedDataset, SubjectRecords};
use crate::error::{Error, Result};

/// Piecewise-slope regressors around the change point `tau`:
/// `(min(t, tau), max(t - tau, 0))`.
pub fn piecewise_time(t: f64, tau: f64) -> Result<(f64, f64)> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::invalid(format!("time must be non-negative, got {t}")));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid(format!("change point must be positive, got {tau}")));
    }
    Ok((t.min(tau), (t - tau).max(0.0)))
}

/// Time transform used as a design column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimeTerm {
    /// Raw time `t`.
    #[serde(rename = "T")]
    Time,
    /// `min(t, tau)`.
    #[serde(rename = "T1")]
    PreChange,
    /// `max(t - tau, 0)`.
    #[serde(rename = "T2")]
    PostChange,
}

impl TimeTerm {
    pub fn name(self) -> &'static str {
        match self {
            TimeTerm::Time => "T",
            TimeTerm::PreChange => "T1",
            TimeTerm::PostChange => "T2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "T" => Ok(TimeTerm::Time),
            "T1" => Ok(TimeTerm::PreChange),
            "T2" => Ok(TimeTerm::PostChange),
            other => Err(Error::invalid(format!("unknown time term {other:?}"))),
        }
    }

    fn eval(self, t: f64, tau: f64) -> Result<f64> {
        let (t1, t2) = piecewise_time(t, tau)?;
        Ok(match self {
            TimeTerm::Time => t,
            TimeTerm::PreChange => t1,
            TimeTerm::PostChange => t2,
        })
    }
}

/// Fixed- and random-effects design: the same columns enter `X` and `Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub tau: f64,
    pub include_intercept: bool,
    /// Time terms for marker 1 and marker 2.
    pub terms: [Vec<TimeTerm>; 2],
}

impl DesignSpec {
    /// Piecewise slopes before/after `tau`, no intercept.
    pub fn piecewise(tau: f64) -> Self {
        let t = vec![TimeTerm::PreChange, TimeTerm::PostChange];
        Self {
            tau,
            include_intercept: false,
            terms: [t.clone(), t],
        }
    }

    /// Intercept and linear time for both markers.
    pub fn intercept_linear() -> Self {
        Self {
            tau: 4.0,
            include_intercept: true,
            terms: [vec![TimeTerm::Time], vec![TimeTerm::Time]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        for (k, terms) in self.terms.iter().enumerate() {
            for (i, a) in terms.iter().enumerate() {
                if terms[..i].contains(a) {
                    return Err(Error::invalid(format!(
                        "term {} repeated for marker {}",
                        a.name(),
                        k + 1
                    )));
                }
            }
            if terms.is_empty() && !self.include_intercept {
                return Err(Error::invalid(format!("marker {} has no design columns", k + 1)));
            }
        }
        Ok(())
    }

    /// Number of columns for one marker.
    pub fn marker_columns(&self, marker: Marker) -> usize {
        self.terms[marker.index()].len() + usize::from(self.include_intercept)
    }

    pub fn n_fixed(&self) -> usize {
        self.marker_columns(Marker::M1) + self.marker_columns(Marker::M2)
    }

    fn column_offset(&self, marker: Marker) -> usize {
        match marker {
            Marker::M1 => 0,
            Marker::M2 => self.marker_columns(Marker::M1),
        }
    }

    fn marker_row(&self, t: f64) -> impl Fn(Marker) -> Result<Vec<f64>> + '_ {
        move |marker| {
            let mut row = Vec::with_capacity(self.marker_columns(marker));
            if self.include_intercept {
                row.push(1.0);
            }
            for term in &self.terms[marker.index()] {
                row.push(term.eval(t, self.tau)?);
            }
            Ok(row)
        }
    }
}

/// Column names `"<marker>:<term>"` in design order.
pub fn fixed_effect_names(spec: &DesignSpec) -> Vec<String> {
    let mut names = Vec::with_capacity(spec.n_fixed());
    for m in Marker::BOTH {
        if spec.include_intercept {
            names.push(format!("{m}:Intercept"));
        }
        for t in &spec.terms[m.index()] {
            names.push(format!("{m}:{}", t.name()));
        }
    }
    names
}

/// Per-subject response and block-diagonal design matrices, rows in canonical
/// (marker-major, occasion-ascending) order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDesign {
    pub subject: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub markers: Vec<Marker>,
    pub occasions: Vec<u32>,
}

impl SubjectDesign {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn occasions_of(&self, marker: Marker) -> Vec<u32> {
        self.markers
            .iter()
            .zip(&self.occasions)
            .filter(|(m, _)| **m == marker)
            .map(|(_, o)| *o)
            .collect()
    }

    pub(crate) fn from_records(s: &SubjectRecords, spec: &DesignSpec) -> Result<Self> {
        let n = s.records.len();
        let p = spec.n_fixed();
        let mut x = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        let mut markers = Vec::with_capacity(n);
        let mut occasions = Vec::with_capacity(n);
        for (i, r) in s.records.iter().enumerate() {
            let row = spec.marker_row(r.time)(r.marker)?;
            let off = spec.column_offset(r.marker);
            for (j, v) in row.into_iter().enumerate() {
                x[(i, off + j)] = v;
            }
            y[i] = r.response;
            markers.push(r.marker);
            occasions.push(r.occasion);
        }
        Ok(Self {
            subject: s.subject.clone(),
            y,
            z: x.clone(),
            x,
            markers,
            occasions,
        })
    }
}

/// Builds one [`SubjectDesign`] per subject of `data`.
pub fn build_design(data: &StackedDataset, spec: &DesignSpec) -> Result<Vec<SubjectDesign>> {
    spec.validate()?;
    data.subjects()
        .iter()
        .map(|s| SubjectDesign::from_records(s, spec))
        .collect()
}
