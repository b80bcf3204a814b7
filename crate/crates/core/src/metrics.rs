//! Point and distributional evaluation: RMSE, MAE, NLPD, interval coverage
//! and length summaries, and threshold-exceedance skill scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihoods::PredictiveDistribution;

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let ss: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / y.len() as f64).sqrt())
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / y.len() as f64)
}

/// Mean negative log predictive density over aligned (prediction, target)
/// pairs.
pub fn nlpd(preds: &[PredictiveDistribution], y: &[f64]) -> Result<f64> {
    if preds.len() != y.len() || y.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} targets",
            preds.len(),
            y.len()
        )));
    }
    let s: f64 = preds.iter().zip(y).map(|(p, t)| p.nlpd(*t)).sum();
    Ok(s / y.len() as f64)
}

/// Median / interquartile range / maximum of interval lengths.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LengthSummary {
    pub median: f64,
    pub iqr: f64,
    pub max: f64,
}

/// Fraction of targets inside their central `level` interval, plus a summary
/// of the interval lengths.
pub fn coverage_and_length(
    preds: &[PredictiveDistribution],
    y: &[f64],
    level: f64,
) -> Result<(f64, LengthSummary)> {
    if preds.len() != y.len() || y.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} targets",
            preds.len(),
            y.len()
        )));
    }
    let mut covered = 0usize;
    let mut lengths = Vec::with_capacity(y.len());
    for (p, t) in preds.iter().zip(y) {
        let (lo, hi) = p.interval(level)?;
        if *t >= lo && *t <= hi {
            covered += 1;
        }
        lengths.push(hi - lo);
    }
    lengths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let summary = LengthSummary {
        median: quantile_sorted(&lengths, 0.5),
        iqr: quantile_sorted(&lengths, 0.75) - quantile_sorted(&lengths, 0.25),
        max: *lengths.last().unwrap(),
    };
    Ok((covered as f64 / y.len() as f64, summary))
}

/// Linear-interpolation quantile of a sorted slice (the common "type 7"
/// convention: index h = (n-1) q).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// 2x2 contingency table for threshold-exceedance events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub hits: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub correct_negatives: usize,
}

/// A skill score, or a marker when its denominator vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Score {
    Defined(f64),
    NotDefined,
}

impl Score {
    pub fn value(&self) -> Option<f64> {
        match self {
            Score::Defined(v) => Some(*v),
            Score::NotDefined => None,
        }
    }
}

impl std::fmt::Display for Score {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Score::Defined(v) => write!(f, "{v}"),
            Score::NotDefined => write!(f, "NA"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SkillScores {
    pub hss: Score,
    pub tss: Score,
    pub table: ContingencyTable,
}

/// Heidke and true skill scores for the event `value >= threshold` applied to
/// observations and predictions alike.
///
/// With a = hits, b = false alarms, c = misses, d = correct negatives:
/// `HSS = 2(ad - bc) / [(a+c)(c+d) + (a+b)(b+d)]` and
/// `TSS = a/(a+c) - b/(b+d)`. Vanishing denominators yield
/// [`Score::NotDefined`] rather than NaN.
pub fn skill_scores(y: &[f64], y_hat: &[f64], threshold: f64) -> Result<SkillScores> {
    check_lengths(y, y_hat)?;
    let mut t = ContingencyTable {
        hits: 0,
        misses: 0,
        false_alarms: 0,
        correct_negatives: 0,
    };
    for (obs, pred) in y.iter().zip(y_hat) {
        match (*obs >= threshold, *pred >= threshold) {
            (true, true) => t.hits += 1,
            (true, false) => t.misses += 1,
            (false, true) => t.false_alarms += 1,
            (false, false) => t.correct_negatives += 1,
        }
    }
    let (a, b, c, d) = (
        t.hits as f64,
        t.false_alarms as f64,
        t.misses as f64,
        t.correct_negatives as f64,
    );
    let hss_den = (a + c) * (c + d) + (a + b) * (b + d);
    let hss = if hss_den > 0.0 {
        Score::Defined(2.0 * (a * d - b * c) / hss_den)
    } else {
        Score::NotDefined
    };
    let tss = if a + c > 0.0 && b + d > 0.0 {
        Score::Defined(a / (a + c) - b / (b + d))
    } else {
        Score::NotDefined
    };
    Ok(SkillScores { hss, tss, table: t })
}

fn check_lengths(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} observations vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}
