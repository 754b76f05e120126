use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{stack_wide, LongRecord, Marker, OccasionGrid, StackedDataset, WideRow};
use crate::error::{Error, Result};

/// Column names of a wide file: one column per marker, empty cell = missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WideColumns {
    pub subject: String,
    pub markers: [String; 2],
    pub time: String,
}

/// Column names of a long file; the marker column holds 0 (M1) or 1 (M2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongColumns {
    pub subject: String,
    pub marker: String,
    pub time: String,
    pub response: String,
}

impl Default for LongColumns {
    fn default() -> Self {
        Self {
            subject: "subject".into(),
            marker: "marker".into(),
            time: "time".into(),
            response: "response".into(),
        }
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column {name:?}"),
        })
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn parse_f64(cell: &str, line: u64, what: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {what} {cell:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("{what} must be finite, got {cell:?}"),
        });
    }
    Ok(v)
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

pub fn read_wide_csv<R: Read>(
    input: R,
    cols: &WideColumns,
    grid: OccasionGrid,
) -> Result<StackedDataset> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let is = column_index(&headers, &cols.subject)?;
    let it = column_index(&headers, &cols.time)?;
    let im = [
        column_index(&headers, &cols.markers[0])?,
        column_index(&headers, &cols.markers[1])?,
    ];
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let subject = cell(is).to_string();
        if subject.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty subject id".into(),
            });
        }
        let time = parse_f64(cell(it), line, "time")?;
        let mut values = [None, None];
        for k in 0..2 {
            let c = cell(im[k]);
            if !c.is_empty() && !c.eq_ignore_ascii_case("na") && c != "." {
                values[k] = Some(parse_f64(c, line, &cols.markers[k])?);
            }
        }
        rows.push(WideRow {
            subject,
            time,
            values,
        });
    }
    stack_wide(&rows, grid)
}

pub fn read_long_csv<R: Read>(
    input: R,
    cols: &LongColumns,
    grid: OccasionGrid,
) -> Result<StackedDataset> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let is = column_index(&headers, &cols.subject)?;
    let im = column_index(&headers, &cols.marker)?;
    let it = column_index(&headers, &cols.time)?;
    let ir = column_index(&headers, &cols.response)?;
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let subject = cell(is).to_string();
        if subject.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty subject id".into(),
            });
        }
        let marker = match cell(im) {
            "0" => Marker::M1,
            "1" => Marker::M2,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("marker must be 0 or 1, got {other:?}"),
                })
            }
        };
        let time = parse_f64(cell(it), line, "time")?;
        let response = parse_f64(cell(ir), line, "response")?;
        let occasion = grid.occasion_of(&subject, time)?;
        records.push(LongRecord {
            subject,
            marker,
            time,
            occasion,
            response,
        });
    }
    StackedDataset::new(records, grid)
}

/// Writes `subject,marker,time,response` rows (marker 0/1) at full precision.
pub fn write_long_csv<W: Write>(out: W, data: &StackedDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["subject", "marker", "time", "response"]).map_err(io)?;
    for r in data.records() {
        w.write_record([
            r.subject.clone(),
            r.marker.index().to_string(),
            r.time.to_string(),
            r.response.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
