//! Lag/seasonal feature construction for timestamped series.
//!
//! The series is tiled into consecutive target windows. For each window the
//! response is aggregated (max) over the window, and every raw covariate
//! contributes pooled medians over equal-width bins spanning the lookback
//! period that ends where the window starts (optionally offset by a horizon).
//! Four seasonal features (sin/cos of time-of-day and day-of-year) can be
//! appended. With the defaults (5-minute pools over a 1-hour lookback) each
//! covariate yields 12 pooled features, so 8 covariates give 96 features, or
//! 100 with the seasonal block.

use chrono::{DateTime, Datelike, NaiveDate, Timelike};
use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Timestamped covariates plus a response series. Timestamps are unix seconds
/// and must be strictly increasing.
#[derive(Debug, Clone)]
pub struct TimeSeriesTable {
    pub timestamps: Vec<i64>,
    pub covariate_names: Vec<String>,
    /// One inner vector per covariate, aligned with `timestamps`.
    pub covariates: Vec<Vec<f64>>,
    pub response: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LagFeatureConfig {
    /// Width of one pooled-median bin, seconds.
    pub pool_width_secs: i64,
    /// Total lookback covered by the bins, seconds. Must be a multiple of the
    /// pool width.
    pub lookback_secs: i64,
    /// Gap between the end of the lookback and the start of the target
    /// window, seconds.
    pub horizon_secs: i64,
    /// Width of the target window the response is aggregated over, seconds.
    pub target_window_secs: i64,
    /// Append sin/cos time-of-day and day-of-year features.
    pub seasonal: bool,
}

impl Default for LagFeatureConfig {
    fn default() -> Self {
        Self {
            pool_width_secs: 5 * 60,
            lookback_secs: 60 * 60,
            horizon_secs: 0,
            target_window_secs: 20 * 60,
            seasonal: true,
        }
    }
}

/// Build a regression dataset from a timestamped series.
///
/// Target windows start at `t0 + lookback + horizon` and advance by the
/// window width. A row is emitted only when every pooled bin and the target
/// window are non-empty; rows with incomplete lookback are dropped. The
/// window start time is recorded as the row timestamp.
pub fn build_lag_features(table: &TimeSeriesTable, cfg: &LagFeatureConfig) -> Result<Dataset> {
    validate_table(table)?;
    if cfg.pool_width_secs <= 0
        || cfg.lookback_secs <= 0
        || cfg.target_window_secs <= 0
        || cfg.horizon_secs < 0
    {
        return Err(Error::InvalidParameter(
            "lag-feature durations must be positive (horizon nonnegative)".to_string(),
        ));
    }
    if cfg.lookback_secs % cfg.pool_width_secs != 0 {
        return Err(Error::InvalidParameter(format!(
            "lookback ({}) must be a multiple of the pool width ({})",
            cfg.lookback_secs, cfg.pool_width_secs
        )));
    }
    let n_pools = (cfg.lookback_secs / cfg.pool_width_secs) as usize;
    let n_cov = table.covariate_names.len();
    let ts = &table.timestamps;
    let t0 = ts[0];
    let t_last = *ts.last().unwrap();

    let mut names: Vec<String> = Vec::with_capacity(n_cov * n_pools + 4);
    for cov in &table.covariate_names {
        for k in 1..=n_pools {
            // lag01 is the most recent bin before the window.
            names.push(format!("{cov}_lag{k:02}"));
        }
    }
    if cfg.seasonal {
        for s in ["tod_sin", "tod_cos", "doy_sin", "doy_cos"] {
            names.push(s.to_string());
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut row_stamps: Vec<i64> = Vec::new();
    let mut start = t0 + cfg.lookback_secs + cfg.horizon_secs;
    let mut bin_values: Vec<f64> = Vec::new();
    while start < t_last + cfg.target_window_secs {
        let window_end = start + cfg.target_window_secs;
        let lookback_end = start - cfg.horizon_secs;
        let lookback_start = lookback_end - cfg.lookback_secs;
        let mut row: Vec<f64> = Vec::with_capacity(names.len());
        let mut complete = true;

        'cov: for cov in &table.covariates {
            // Bin k = 1 covers the most recent pool before the lookback end.
            for k in 0..n_pools {
                let bin_end = lookback_end - (k as i64) * cfg.pool_width_secs;
                let bin_start = bin_end - cfg.pool_width_secs;
                bin_values.clear();
                for (i, &t) in ts.iter().enumerate() {
                    if t >= bin_start && t < bin_end {
                        bin_values.push(cov[i]);
                    } else if t >= bin_end {
                        break;
                    }
                }
                if bin_values.is_empty() {
                    complete = false;
                    break 'cov;
                }
                row.push(median(&mut bin_values));
            }
        }
        if complete {
            let mut best: Option<f64> = None;
            for (i, &t) in ts.iter().enumerate() {
                if t >= start && t < window_end {
                    let v = table.response[i];
                    best = Some(match best {
                        Some(b) => b.max(v),
                        None => v,
                    });
                } else if t >= window_end {
                    break;
                }
            }
            if let Some(target) = best {
                if cfg.seasonal {
                    row.extend(seasonal_features(start));
                }
                debug_assert_eq!(row.len(), names.len());
                rows.push(row);
                targets.push(target);
                row_stamps.push(start);
            }
        }
        // Windows past the last lookback-complete position cannot recover.
        if lookback_start > t_last {
            break;
        }
        start += cfg.target_window_secs;
    }
    if rows.is_empty() {
        return Err(Error::EmptyAfterWindowing);
    }
    let features = DMatrix::from_fn(rows.len(), names.len(), |r, c| rows[r][c]);
    let mut ds = Dataset::new(features, DVector::from_vec(targets), names)?;
    ds.timestamps = Some(row_stamps);
    Ok(ds)
}

fn validate_table(table: &TimeSeriesTable) -> Result<()> {
    let n = table.timestamps.len();
    if n == 0 {
        return Err(Error::EmptyAfterFiltering("empty time series".to_string()));
    }
    if table.response.len() != n || table.covariates.iter().any(|c| c.len() != n) {
        return Err(Error::DimensionMismatch(
            "time-series columns have unequal lengths".to_string(),
        ));
    }
    if table.covariates.len() != table.covariate_names.len() {
        return Err(Error::DimensionMismatch(
            "covariate name/column count mismatch".to_string(),
        ));
    }
    for i in 1..n {
        if table.timestamps[i] <= table.timestamps[i - 1] {
            return Err(Error::NonMonotonicTimestamps(i));
        }
    }
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `[sin, cos](2 pi * time-of-day)` and `[sin, cos](2 pi * day-of-year)` for a
/// unix timestamp, using the actual year length for the day fraction.
fn seasonal_features(unix: i64) -> [f64; 4] {
    let dt = DateTime::from_timestamp(unix, 0).expect("valid unix timestamp");
    let tod = dt.time().num_seconds_from_midnight() as f64 / 86_400.0;
    let year = dt.year();
    let days_in_year = if NaiveDate::from_ymd_opt(year, 12, 31)
        .map(|d| d.ordinal() == 366)
        .unwrap_or(false)
    {
        366.0
    } else {
        365.0
    };
    let doy = (dt.ordinal0() as f64 + tod) / days_in_year;
    let tau = 2.0 * std::f64::consts::PI;
    [
        (tau * tod).sin(),
        (tau * tod).cos(),
        (tau * doy).sin(),
        (tau * doy).cos(),
    ]
}
