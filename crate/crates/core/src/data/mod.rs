//! Long-format marker data, stacking of two markers into one response and
//! construction of per-subject block design matrices.

mod csv_io;
mod design;

pub use csv_io::{read_long_csv, read_wide_csv, write_long_csv, LongColumns, WideColumns};
pub use design::{
    build_design, fixed_effect_names, piecewise_time, DesignSpec, SubjectDesign, TimeTerm,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of the two stacked markers a record belongs to (indicator 0 / 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Marker {
    M1,
    M2,
}

impl Marker {
    pub const BOTH: [Marker; 2] = [Marker::M1, Marker::M2];

    pub fn index(self) -> usize {
        match self {
            Marker::M1 => 0,
            Marker::M2 => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Marker> {
        match i {
            0 => Some(Marker::M1),
            1 => Some(Marker::M2),
            _ => None,
        }
    }

    pub fn other(self) -> Marker {
        match self {
            Marker::M1 => Marker::M2,
            Marker::M2 => Marker::M1,
        }
    }
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Marker::M1 => write!(f, "M1"),
            Marker::M2 => write!(f, "M2"),
        }
    }
}

/// One observation: a subject's value of one marker at one scheduled occasion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRecord {
    pub subject: String,
    pub marker: Marker,
    /// Months since the origin of the occasion grid.
    pub time: f64,
    pub occasion: u32,
    pub response: f64,
}

/// Equally spaced visit schedule: occasion `k` is at `origin + k * spacing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccasionGrid {
    pub spacing: f64,
    pub origin: f64,
}

impl OccasionGrid {
    pub fn new(spacing: f64, origin: f64) -> Result<Self> {
        if !(spacing.is_finite() && spacing > 0.0) || !origin.is_finite() {
            return Err(Error::invalid(format!(
                "occasion spacing must be positive and finite (got {spacing}), origin finite (got {origin})"
            )));
        }
        Ok(Self { spacing, origin })
    }

    fn tolerance(&self) -> f64 {
        1e-6 * self.spacing
    }

    pub fn time_of(&self, occasion: u32) -> f64 {
        self.origin + occasion as f64 * self.spacing
    }

    /// Occasion index of `time`, or a grid violation naming `subject`.
    pub fn occasion_of(&self, subject: &str, time: f64) -> Result<u32> {
        let violation = || Error::GridViolation {
            subject: subject.to_string(),
            time,
            spacing: self.spacing,
            origin: self.origin,
        };
        if !time.is_finite() {
            return Err(violation());
        }
        let k = ((time - self.origin) / self.spacing).round();
        if k < 0.0 || k > u32::MAX as f64 {
            return Err(violation());
        }
        if (time - self.time_of(k as u32)).abs() > self.tolerance() {
            return Err(violation());
        }
        Ok(k as u32)
    }
}

/// All records of one subject in canonical order (marker-major, occasion-ascending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecords {
    pub subject: String,
    pub records: Vec<LongRecord>,
}

impl SubjectRecords {
    pub fn occasions(&self, marker: Marker) -> Vec<u32> {
        self.records
            .iter()
            .filter(|r| r.marker == marker)
            .map(|r| r.occasion)
            .collect()
    }
}

/// Validated stacked dataset, grouped by subject (subjects sorted by id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedDataset {
    subjects: Vec<SubjectRecords>,
    grid: OccasionGrid,
}

impl StackedDataset {
    /// Validates and groups `records`. Records must already carry occasions that
    /// agree with their times on `grid`.
    pub fn new(records: Vec<LongRecord>, grid: OccasionGrid) -> Result<Self> {
        let mut by_subject: BTreeMap<String, Vec<LongRecord>> = BTreeMap::new();
        for r in records {
            if !r.response.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite response for subject {} marker {} occasion {}",
                    r.subject, r.marker, r.occasion
                )));
            }
            let occ = grid.occasion_of(&r.subject, r.time)?;
            if occ != r.occasion {
                return Err(Error::GridViolation {
                    subject: r.subject.clone(),
                    time: r.time,
                    spacing: grid.spacing,
                    origin: grid.origin,
                });
            }
            by_subject.entry(r.subject.clone()).or_default().push(r);
        }
        let mut subjects = Vec::with_capacity(by_subject.len());
        for (subject, mut recs) in by_subject {
            recs.sort_by(|a, b| (a.marker, a.occasion).cmp(&(b.marker, b.occasion)));
            for w in recs.windows(2) {
                if w[0].marker == w[1].marker && w[0].occasion == w[1].occasion {
                    return Err(Error::DuplicateObservation {
                        subject,
                        marker: w[0].marker.to_string(),
                        occasion: w[0].occasion,
                    });
                }
            }
            subjects.push(SubjectRecords {
                subject,
                records: recs,
            });
        }
        Ok(Self { subjects, grid })
    }

    /// Builds a dataset from `(subject, marker, time, response)` tuples, deriving
    /// each occasion from its time.
    pub fn from_observations<I, S>(observations: I, grid: OccasionGrid) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Marker, f64, f64)>,
        S: Into<String>,
    {
        let mut records = Vec::new();
        for (subject, marker, time, response) in observations {
            let subject = subject.into();
            let occasion = grid.occasion_of(&subject, time)?;
            records.push(LongRecord {
                subject,
                marker,
                time,
                occasion,
                response,
            });
        }
        Self::new(records, grid)
    }

    pub fn empty(grid: OccasionGrid) -> Self {
        Self {
            subjects: Vec::new(),
            grid,
        }
    }

    pub fn subjects(&self) -> &[SubjectRecords] {
        &self.subjects
    }

    pub fn grid(&self) -> OccasionGrid {
        self.grid
    }

    pub fn occasion_spacing(&self) -> f64 {
        self.grid.spacing
    }

    pub fn records(&self) -> impl Iterator<Item = &LongRecord> {
        self.subjects.iter().flat_map(|s| s.records.iter())
    }

    pub fn n_records(&self) -> usize {
        self.subjects.iter().map(|s| s.records.len()).sum()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Keeps the records for which `keep` is true; subjects left without records
    /// are dropped.
    pub fn filter_records(&self, mut keep: impl FnMut(&LongRecord) -> bool) -> Self {
        let subjects = self
            .subjects
            .iter()
            .filter_map(|s| {
                let records: Vec<_> = s.records.iter().filter(|r| keep(r)).cloned().collect();
                (!records.is_empty()).then(|| SubjectRecords {
                    subject: s.subject.clone(),
                    records,
                })
            })
            .collect();
        Self {
            subjects,
            grid: self.grid,
        }
    }

    pub(crate) fn from_sorted_parts(subjects: Vec<SubjectRecords>, grid: OccasionGrid) -> Self {
        Self { subjects, grid }
    }
}

/// A row of wide-format input: one subject at one time with up to two marker values.
#[derive(Debug, Clone, PartialEq)]
pub struct WideRow {
    pub subject: String,
    pub time: f64,
    pub values: [Option<f64>; 2],
}

/// Stacks wide rows into one record per non-missing marker value.
pub fn stack_wide(rows: &[WideRow], grid: OccasionGrid) -> Result<StackedDataset> {
    let mut records = Vec::with_capacity(2 * rows.len());
    for row in rows {
        let occasion = grid.occasion_of(&row.subject, row.time)?;
        for marker in Marker::BOTH {
            if let Some(v) = row.values[marker.index()] {
                records.push(LongRecord {
                    subject: row.subject.clone(),
                    marker,
                    time: row.time,
                    occasion,
                    response: v,
                });
            }
        }
    }
    StackedDataset::new(records, grid)
}

/// Inverse of [`stack_wide`]: one row per (subject, occasion), sorted.
pub fn unstack(data: &StackedDataset) -> Vec<WideRow> {
    let mut rows = Vec::new();
    for s in data.subjects() {
        let mut by_occ: BTreeMap<u32, WideRow> = BTreeMap::new();
        for r in &s.records {
            let row = by_occ.entry(r.occasion).or_insert_with(|| WideRow {
                subject: s.subject.clone(),
                time: r.time,
                values: [None, None],
            });
            row.values[r.marker.index()] = Some(r.response);
        }
        rows.extend(by_occ.into_values());
    }
    rows
}

/// Replaces each response by its change since the subject's baseline (occasion 0)
/// value of the same marker and removes the baseline rows.
///
/// Subjects with a marker series that lacks a baseline are excluded; their ids are
/// returned alongside the transformed dataset.
pub fn baseline_difference(data: &StackedDataset) -> (StackedDataset, Vec<String>) {
    let mut subjects = Vec::new();
    let mut excluded = Vec::new();
    'subjects: for s in data.subjects() {
        let mut baselines = [None, None];
        let markers: BTreeSet<Marker> = s.records.iter().map(|r| r.marker).collect();
        for r in s.records.iter().filter(|r| r.occasion == 0) {
            baselines[r.marker.index()] = Some(r.response);
        }
        for m in &markers {
            if baselines[m.index()].is_none() {
                log::warn!(
                    "subject {} excluded: marker {} has no baseline (occasion 0) value",
                    s.subject,
                    m
                );
                excluded.push(s.subject.clone());
                continue 'subjects;
            }
        }
        let records: Vec<LongRecord> = s
            .records
            .iter()
            .filter(|r| r.occasion > 0)
            .map(|r| LongRecord {
                response: r.response - baselines[r.marker.index()].unwrap_or(0.0),
                ..r.clone()
            })
            .collect();
        if !records.is_empty() {
            subjects.push(SubjectRecords {
                subject: s.subject.clone(),
                records,
            });
        }
    }
    (
        StackedDataset::from_sorted_parts(subjects, data.grid()),
        excluded,
    )
}

/// Per-marker, per-occasion count, mean and SD of the responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccasionSummary {
    pub marker: Marker,
    pub occasion: u32,
    pub time: f64,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

pub fn occasion_summary(data: &StackedDataset) -> Vec<OccasionSummary> {
    let mut groups: BTreeMap<(Marker, u32), Vec<f64>> = BTreeMap::new();
    for r in data.records() {
        groups.entry((r.marker, r.occasion)).or_default().push(r.response);
    }
    groups
        .into_iter()
        .map(|((marker, occasion), v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                f64::NAN
            };
            OccasionSummary {
                marker,
                occasion,
                time: data.grid().time_of(occasion),
                n,
                mean,
                sd,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid4() -> OccasionGrid {
        OccasionGrid::new(4.0, 0.0).unwrap()
    }

    #[test]
    fn stacks_listing_row_into_two_records() {
        let rows = vec![WideRow {
            subject: "1001".into(),
            time: 4.0,
            values: [Some(-3.02635), Some(166.0)],
        }];
        let d = stack_wide(&rows, grid4()).unwrap();
        let recs: Vec<_> = d.records().cloned().collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].marker, Marker::M1);
        assert_eq!(recs[0].occasion, 1);
        assert_eq!(recs[0].response, -3.02635);
        assert_eq!(recs[1].marker, Marker::M2);
        assert_eq!(recs[1].occasion, 1);
        assert_eq!(recs[1].response, 166.0);
    }

    #[test]
    fn missing_marker_value_drops_one_record() {
        let rows = vec![WideRow {
            subject: "7".into(),
            time: 8.0,
            values: [None, Some(12.0)],
        }];
        let d = stack_wide(&rows, grid4()).unwrap();
        let recs: Vec<_> = d.records().collect();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].marker, Marker::M2);
    }

    #[test]
    fn empty_input_gives_empty_dataset() {
        let d = stack_wide(&[], grid4()).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.n_records(), 0);
    }

    #[test]
    fn duplicate_observation_rejected() {
        let row = WideRow {
            subject: "1".into(),
            time: 4.0,
            values: [Some(1.0), None],
        };
        let err = stack_wide(&[row.clone(), row], grid4()).unwrap_err();
        assert!(matches!(err, Error::DuplicateObservation { occasion: 1, .. }));
    }

    #[test]
    fn off_grid_time_rejected() {
        let row = WideRow {
            subject: "1".into(),
            time: 5.0,
            values: [Some(1.0), None],
        };
        assert!(matches!(
            stack_wide(&[row], grid4()).unwrap_err(),
            Error::GridViolation { .. }
        ));
        // inside the 1e-6 * spacing tolerance
        let ok = WideRow {
            subject: "1".into(),
            time: 8.0 + 1e-7,
            values: [Some(1.0), None],
        };
        assert_eq!(stack_wide(&[ok], grid4()).unwrap().records().next().unwrap().occasion, 2);
    }

    #[test]
    fn non_finite_response_rejected() {
        let row = WideRow {
            subject: "1".into(),
            time: 4.0,
            values: [Some(f64::NAN), None],
        };
        assert!(matches!(
            stack_wide(&[row], grid4()).unwrap_err(),
            Error::InvalidArgument(_)
        ));
    }

    #[test]
    fn baseline_difference_subtracts_and_drops_baseline() {
        let d = StackedDataset::from_observations(
            vec![("a", Marker::M1, 0.0, 5.1), ("a", Marker::M1, 4.0, 3.1)],
            grid4(),
        )
        .unwrap();
        let (out, excluded) = baseline_difference(&d);
        assert!(excluded.is_empty());
        let recs: Vec<_> = out.records().collect();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].occasion, 1);
        assert!((recs[0].response - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn baseline_difference_cd4_scale() {
        let d = StackedDataset::from_observations(
            vec![
                ("a", Marker::M2, 0.0, 400.0),
                ("a", Marker::M2, 4.0, 497.0),
                ("a", Marker::M2, 8.0, 526.0),
            ],
            grid4(),
        )
        .unwrap();
        let (out, _) = baseline_difference(&d);
        let v: Vec<f64> = out.records().map(|r| r.response).collect();
        assert_eq!(v, vec![97.0, 126.0]);
    }

    #[test]
    fn baseline_only_series_becomes_empty() {
        let d = StackedDataset::from_observations(vec![("a", Marker::M1, 0.0, 5.0)], grid4())
            .unwrap();
        let (out, excluded) = baseline_difference(&d);
        assert!(excluded.is_empty());
        assert!(out.is_empty());
    }

    #[test]
    fn missing_baseline_excludes_subject() {
        let d = StackedDataset::from_observations(
            vec![
                ("a", Marker::M1, 4.0, 1.0),
                ("b", Marker::M1, 0.0, 1.0),
                ("b", Marker::M1, 4.0, 2.0),
            ],
            grid4(),
        )
        .unwrap();
        let (out, excluded) = baseline_difference(&d);
        assert_eq!(excluded, vec!["a".to_string()]);
        assert_eq!(out.n_subjects(), 1);
    }

    #[test]
    fn occasion_summary_counts() {
        let d = StackedDataset::from_observations(
            vec![
                ("a", Marker::M1, 4.0, 1.0),
                ("b", Marker::M1, 4.0, 3.0),
                ("b", Marker::M2, 8.0, 3.0),
            ],
            grid4(),
        )
        .unwrap();
        let s = occasion_summary(&d);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].n, 2);
        assert!((s[0].mean - 2.0).abs() < 1e-12);
        assert!((s[0].sd - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1].time, 8.0);
    }
}
