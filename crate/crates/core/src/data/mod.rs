//! Datasets, standardization, splits, simulation generators, CSV ingestion,
//! and time-series feature construction.

mod csv_io;
mod features;
mod simulate;

pub use csv_io::{load_csv, load_timeseries_csv, save_csv, write_table, CsvLoad, FeatureSelection};
pub use features::{build_lag_features, LagFeatureConfig, TimeSeriesTable};
pub use simulate::{
    friedman_function, sim1_function, simulate_friedman, simulate_friedman_noise_free,
    simulate_sim1, SimData, FRIEDMAN_OUTLIER_MEAN,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Feature matrix, target vector, and optional per-row split labels and
/// timestamps (unix seconds; populated by the time-series pipeline).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub target: DVector<f64>,
    pub feature_names: Vec<String>,
    pub split: Option<Vec<Split>>,
    pub timestamps: Option<Vec<i64>>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, target: DVector<f64>, names: Vec<String>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyAfterFiltering("dataset has no rows".to_string()));
        }
        if features.nrows() != target.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows for {} targets",
                features.nrows(),
                target.len()
            )));
        }
        if names.len() != features.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} names for {} feature columns",
                names.len(),
                features.ncols()
            )));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate feature name '{a}'"
                )));
            }
        }
        if features.iter().any(|v| !v.is_finite()) || target.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "dataset contains non-finite entries".to_string(),
            ));
        }
        Ok(Self {
            features,
            target,
            feature_names: names,
            split: None,
            timestamps: None,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Row indices labeled `which`; all rows when no labels are present and
    /// `which` is `Train`.
    pub fn rows_with_split(&self, which: Split) -> Vec<usize> {
        match &self.split {
            Some(labels) => (0..self.n()).filter(|&i| labels[i] == which).collect(),
            None if which == Split::Train => (0..self.n()).collect(),
            None => Vec::new(),
        }
    }

    /// Copy of the rows at `idx` (split labels and timestamps carried along).
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::EmptyAfterFiltering("empty row selection".to_string()));
        }
        let p = self.dim();
        let mut features = DMatrix::<f64>::zeros(idx.len(), p);
        let mut target = DVector::<f64>::zeros(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..p {
                features[(r, c)] = self.features[(i, c)];
            }
            target[r] = self.target[i];
        }
        let mut out = Dataset::new(features, target, self.feature_names.clone())?;
        out.split = self
            .split
            .as_ref()
            .map(|s| idx.iter().map(|&i| s[i]).collect());
        out.timestamps = self
            .timestamps
            .as_ref()
            .map(|t| idx.iter().map(|&i| t[i]).collect());
        Ok(out)
    }

    /// Feature matrix and targets of one split.
    pub fn xy(&self, which: Split) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let idx = self.rows_with_split(which);
        if idx.is_empty() {
            return Err(Error::EmptyAfterFiltering(format!(
                "no rows labeled {}",
                which.as_str()
            )));
        }
        let sub = self.subset(&idx)?;
        Ok((sub.features, sub.target))
    }
}

/// Per-column location/scale fitted on the training split only.
///
/// Uses the sample (n-1) standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    /// Fit on the training rows of `ds` (all rows when unlabeled).
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let rows = ds.rows_with_split(Split::Train);
        if rows.len() < 2 {
            return Err(Error::DataTooSmall(
                "standardizer needs at least two training rows".to_string(),
            ));
        }
        let p = ds.dim();
        let n = rows.len() as f64;
        let mut means = vec![0.0; p];
        let mut sds = vec![0.0; p];
        for c in 0..p {
            let mut s = 0.0;
            for &r in &rows {
                s += ds.features[(r, c)];
            }
            let mean = s / n;
            let mut ss = 0.0;
            for &r in &rows {
                let d = ds.features[(r, c)] - mean;
                ss += d * d;
            }
            let sd = (ss / (n - 1.0)).sqrt();
            if !(sd > 0.0) {
                return Err(Error::ConstantColumn(ds.feature_names[c].clone()));
            }
            means[c] = mean;
            sds[c] = sd;
        }
        Ok(Self { means, sds })
    }

    /// Transformed copy of `ds` (features only; the target is untouched).
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if self.means.len() != ds.dim() {
            return Err(Error::DimensionMismatch(format!(
                "standardizer fitted on {} columns, dataset has {}",
                self.means.len(),
                ds.dim()
            )));
        }
        let mut out = ds.clone();
        for c in 0..ds.dim() {
            for r in 0..ds.n() {
                out.features[(r, c)] = (ds.features[(r, c)] - self.means[c]) / self.sds[c];
            }
        }
        Ok(out)
    }
}

/// How to assign split labels.
#[derive(Debug, Clone)]
pub enum SplitSpec {
    /// Random assignment by fractions summing to 1.
    Fractions {
        train: f64,
        validation: f64,
        test: f64,
        seed: u64,
    },
    /// Label by timestamp: `< train_end` is train, `< validation_end` is
    /// validation, the rest is test. Requires row timestamps.
    TimeBoundaries { train_end: i64, validation_end: i64 },
}

/// Assign split labels in place. Deterministic given the seed.
pub fn split_dataset(ds: &mut Dataset, spec: &SplitSpec) -> Result<()> {
    let n = ds.n();
    match spec {
        SplitSpec::Fractions {
            train,
            validation,
            test,
            seed,
        } => {
            for f in [train, validation, test] {
                if !(*f >= 0.0 && *f <= 1.0) {
                    return Err(Error::InvalidSplit(format!("fraction {f} out of [0,1]")));
                }
            }
            if (train + validation + test - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidSplit(format!(
                    "fractions must sum to 1, got {}",
                    train + validation + test
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(*seed, streams::SPLIT));
            let n_train = (train * n as f64).floor() as usize;
            let n_val = (validation * n as f64).floor() as usize;
            let mut labels = vec![Split::Test; n];
            for (pos, &row) in order.iter().enumerate() {
                labels[row] = if pos < n_train {
                    Split::Train
                } else if pos < n_train + n_val {
                    Split::Validation
                } else {
                    Split::Test
                };
            }
            ds.split = Some(labels);
        }
        SplitSpec::TimeBoundaries {
            train_end,
            validation_end,
        } => {
            if train_end > validation_end {
                return Err(Error::InvalidSplit(
                    "train_end must not exceed validation_end".to_string(),
                ));
            }
            let stamps = ds.timestamps.as_ref().ok_or_else(|| {
                Error::InvalidSplit("time-based split requires row timestamps".to_string())
            })?;
            let labels = stamps
                .iter()
                .map(|&t| {
                    if t < *train_end {
                        Split::Train
                    } else if t < *validation_end {
                        Split::Validation
                    } else {
                        Split::Test
                    }
                })
                .collect();
            ds.split = Some(labels);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy() -> Dataset {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        Dataset::new(x, y, vec!["x1".to_string()]).unwrap()
    }

    #[test]
    fn standardizer_uses_sample_sd() {
        let ds = toy();
        let std = Standardizer::fit(&ds).unwrap();
        assert_relative_eq!(std.means[0], 2.0);
        assert_relative_eq!(std.sds[0], 1.0); // sample sd of (1,2,3)
        let t = std.apply(&ds).unwrap();
        assert_relative_eq!(t.features[(0, 0)], -1.0, epsilon = 1e-12);
        assert_relative_eq!(t.features[(1, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(t.features[(2, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn standardizer_is_identity_on_standardized_input() {
        let x = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let y = DVector::zeros(3);
        let ds = Dataset::new(x, y, vec!["x1".into()]).unwrap();
        let std = Standardizer::fit(&ds).unwrap();
        let t = std.apply(&ds).unwrap();
        for r in 0..3 {
            assert_relative_eq!(t.features[(r, 0)], ds.features[(r, 0)], epsilon = 1e-12);
        }
    }

    #[test]
    fn standardizer_applies_train_statistics_to_validation() {
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 10.0]);
        let y = DVector::zeros(4);
        let mut ds = Dataset::new(x, y, vec!["x1".into()]).unwrap();
        ds.split = Some(vec![
            Split::Train,
            Split::Train,
            Split::Train,
            Split::Validation,
        ]);
        let std = Standardizer::fit(&ds).unwrap();
        let t = std.apply(&ds).unwrap();
        // Validation row standardized with train mean 2 and sd 1.
        assert_relative_eq!(t.features[(3, 0)], 8.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_column_is_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let y = DVector::zeros(3);
        let ds = Dataset::new(x, y, vec!["x1".into(), "c".into()]).unwrap();
        assert!(matches!(
            Standardizer::fit(&ds),
            Err(Error::ConstantColumn(name)) if name == "c"
        ));
    }

    #[test]
    fn fraction_split_all_train() {
        let mut ds = toy();
        split_dataset(
            &mut ds,
            &SplitSpec::Fractions {
                train: 1.0,
                validation: 0.0,
                test: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(ds.rows_with_split(Split::Train).len(), 3);
        assert_eq!(ds.rows_with_split(Split::Test).len(), 0);
    }

    #[test]
    fn fraction_split_is_deterministic_and_exhaustive() {
        let x = DMatrix::from_fn(20, 1, |r, _| r as f64);
        let y = DVector::zeros(20);
        let mut a = Dataset::new(x.clone(), y.clone(), vec!["x1".into()]).unwrap();
        let mut b = Dataset::new(x, y, vec!["x1".into()]).unwrap();
        let spec = SplitSpec::Fractions {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
            seed: 42,
        };
        split_dataset(&mut a, &spec).unwrap();
        split_dataset(&mut b, &spec).unwrap();
        assert_eq!(a.split, b.split);
        assert_eq!(a.rows_with_split(Split::Train).len(), 12);
        assert_eq!(a.rows_with_split(Split::Validation).len(), 4);
        assert_eq!(a.rows_with_split(Split::Test).len(), 4);
    }

    #[test]
    fn invalid_fractions_are_rejected() {
        let mut ds = toy();
        assert!(split_dataset(
            &mut ds,
            &SplitSpec::Fractions {
                train: 0.5,
                validation: 0.1,
                test: 0.1,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn time_split_labels_by_boundary() {
        let mut ds = toy();
        ds.timestamps = Some(vec![100, 200, 300]);
        split_dataset(
            &mut ds,
            &SplitSpec::TimeBoundaries {
                train_end: 150,
                validation_end: 250,
            },
        )
        .unwrap();
        assert_eq!(
            ds.split,
            Some(vec![Split::Train, Split::Validation, Split::Test])
        );
    }

    #[test]
    fn duplicate_names_rejected() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = DVector::zeros(2);
        assert!(Dataset::new(x, y, vec!["a".into(), "a".into()]).is_err());
    }
}
