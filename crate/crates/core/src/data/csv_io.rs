//! CSV ingestion and emission.
//!
//! Format: comma-separated, header row, UTF-8, `.` decimal separator, no
//! quoting of numeric fields. Timestamps are ISO-8601 (`2013-04-01T12:00:00Z`,
//! an offset, or a naive datetime read as UTC). Floats are written with the
//! shortest representation that round-trips exactly.

use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, TimeSeriesTable};
use crate::error::{Error, Result};

/// Which columns become features.
#[derive(Debug, Clone)]
pub enum FeatureSelection {
    /// Every column except the target (and the timestamp column, if named).
    AllOthers,
    /// Exactly these columns, in this order.
    Columns(Vec<String>),
}

#[derive(Debug)]
pub struct CsvLoad {
    pub dataset: Dataset,
    /// Rows dropped because a selected cell was missing or non-numeric.
    pub dropped_rows: usize,
    /// Whether a target column was present and loaded (otherwise the
    /// dataset's target is all zeros).
    pub has_target: bool,
}

/// Load a dataset from CSV.
///
/// Rows with a missing or non-numeric cell in any selected column are dropped
/// and counted. `target` may be `None` for prediction inputs without truth.
/// `timestamp` names an optional ISO-8601 column used for time-based splits.
pub fn load_csv(
    path: &Path,
    target: Option<&str>,
    features: &FeatureSelection,
    timestamp: Option<&str>,
) -> Result<CsvLoad> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(csv_error)?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let target_idx = target.map(col_index).transpose()?;
    let ts_idx = timestamp.map(col_index).transpose()?;
    let feature_idx: Vec<usize> = match features {
        FeatureSelection::Columns(names) => {
            names.iter().map(|n| col_index(n)).collect::<Result<_>>()?
        }
        FeatureSelection::AllOthers => (0..headers.len())
            .filter(|i| Some(*i) != target_idx && Some(*i) != ts_idx)
            .collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::EmptyAfterFiltering(
            "no feature columns selected".to_string(),
        ));
    }
    let feature_names: Vec<String> = feature_idx.iter().map(|&i| headers[i].clone()).collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut stamps: Vec<i64> = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(0);
        if record.len() != headers.len() {
            return Err(Error::MalformedCsv {
                line,
                msg: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let mut keep = true;
        let mut row = Vec::with_capacity(feature_idx.len());
        for &i in &feature_idx {
            match parse_cell(record.get(i).unwrap_or("")) {
                Some(v) => row.push(v),
                None => {
                    keep = false;
                    break;
                }
            }
        }
        let t_val = if keep {
            match target_idx {
                Some(ti) => match parse_cell(record.get(ti).unwrap_or("")) {
                    Some(v) => Some(v),
                    None => {
                        keep = false;
                        None
                    }
                },
                None => Some(0.0),
            }
        } else {
            None
        };
        let ts_val = if keep {
            match ts_idx {
                Some(ci) => {
                    let raw = record.get(ci).unwrap_or("").trim();
                    match parse_timestamp(raw) {
                        Some(t) => Some(Some(t)),
                        None => {
                            return Err(Error::MalformedCsv {
                                line,
                                msg: format!("unparseable timestamp '{raw}'"),
                            })
                        }
                    }
                }
                None => Some(None),
            }
        } else {
            None
        };
        if keep {
            rows.push(row);
            targets.push(t_val.unwrap());
            if let Some(Some(t)) = ts_val {
                stamps.push(t);
            }
        } else {
            dropped += 1;
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyAfterFiltering(format!(
            "all {dropped} data rows were dropped"
        )));
    }
    let n = rows.len();
    let p = feature_idx.len();
    let features_mat = DMatrix::from_fn(n, p, |r, c| rows[r][c]);
    let mut dataset = Dataset::new(features_mat, DVector::from_vec(targets), feature_names)?;
    if ts_idx.is_some() {
        dataset.timestamps = Some(stamps);
    }
    Ok(CsvLoad {
        dataset,
        dropped_rows: dropped,
        has_target: target_idx.is_some(),
    })
}

/// Write features plus the target column (named `target_name`).
pub fn save_csv(ds: &Dataset, target_name: &str, path: &Path) -> Result<()> {
    let mut header: Vec<String> = ds.feature_names.clone();
    header.push(target_name.to_string());
    let rows = (0..ds.n()).map(|r| {
        let mut row: Vec<String> = (0..ds.dim())
            .map(|c| format_float(ds.features[(r, c)]))
            .collect();
        row.push(format_float(ds.target[r]));
        row
    });
    write_table(path, &header, rows)
}

/// Write a generic table; floats should already be formatted by the caller
/// (use [`format_float`] for exact round-trips).
pub fn write_table(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest decimal representation that parses back to the same f64.
pub fn format_float(v: f64) -> String {
    format!("{v}")
}

fn parse_cell(raw: &str) -> Option<f64> {
    let t = raw.trim();
    if t.is_empty() {
        return None;
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Some(v),
        _ => None,
    }
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(naive.and_utc().timestamp());
        }
    }
    None
}

/// Load a timestamped covariate table for the lag-feature pipeline.
///
/// `time_column` and `response_column` are required; every other column is a
/// covariate. Rows with any missing or non-numeric cell are dropped.
pub fn load_timeseries_csv(
    path: &Path,
    time_column: &str,
    response_column: &str,
) -> Result<TimeSeriesTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_error)?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let time_idx = headers
        .iter()
        .position(|h| h == time_column)
        .ok_or_else(|| Error::MissingColumn(time_column.to_string()))?;
    let resp_idx = headers
        .iter()
        .position(|h| h == response_column)
        .ok_or_else(|| Error::MissingColumn(response_column.to_string()))?;
    let cov_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != time_idx && i != resp_idx)
        .collect();
    if cov_idx.is_empty() {
        return Err(Error::EmptyAfterFiltering("no covariate columns".to_string()));
    }

    let mut timestamps = Vec::new();
    let mut response = Vec::new();
    let mut covariates: Vec<Vec<f64>> = vec![Vec::new(); cov_idx.len()];
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let raw_ts = record.get(time_idx).unwrap_or("").trim();
        let ts = match parse_timestamp(raw_ts) {
            Some(t) => t,
            None => {
                return Err(Error::MalformedCsv {
                    line,
                    msg: format!("unparseable timestamp '{raw_ts}'"),
                })
            }
        };
        let resp = parse_cell(record.get(resp_idx).unwrap_or(""));
        let covs: Option<Vec<f64>> = cov_idx
            .iter()
            .map(|&i| parse_cell(record.get(i).unwrap_or("")))
            .collect();
        if let (Some(resp), Some(covs)) = (resp, covs) {
            timestamps.push(ts);
            response.push(resp);
            for (store, v) in covariates.iter_mut().zip(covs) {
                store.push(v);
            }
        }
    }
    if timestamps.is_empty() {
        return Err(Error::EmptyAfterFiltering(
            "no usable time-series rows".to_string(),
        ));
    }
    Ok(TimeSeriesTable {
        timestamps,
        covariate_names: cov_idx.iter().map(|&i| headers[i].clone()).collect(),
        covariates,
        response,
    })
}

fn csv_error(e: csv::Error) -> Error {
    match e.position() {
        Some(pos) => Error::MalformedCsv {
            line: pos.line(),
            msg: e.to_string(),
        },
        None => Error::MalformedCsv {
            line: 0,
            msg: e.to_string(),
        },
    }
}
