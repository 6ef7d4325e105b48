//! Coverage, width, calibration scores, the above-the-line analysis and rank tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intervals::{PredictionInterval, PredictionSet, PROBABILITY_TOLERANCE};
use crate::numerics::Matrix;

pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("no samples")]
    Empty,
    #[error("scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("row {row} is not a probability vector")]
    InvalidRow { row: usize },
    #[error("label {label} in row {row} is out of range")]
    LabelOutOfRange { row: usize, label: usize },
    #[error("all widths are identical; the regression line is undefined")]
    IdenticalWidths,
    #[error("need at least {needed} methods, got {got}")]
    TooFewMethods { needed: usize, got: usize },
    #[error("bins must be positive")]
    NoBins,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn same_len(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(MetricsError::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Fraction of labels inside their (closed) interval.
pub fn coverage_intervals(intervals: &[PredictionInterval], y: &[f64]) -> Result<f64> {
    same_len(intervals.len(), y.len())?;
    let hits = intervals.iter().zip(y).filter(|(i, y)| i.contains(**y)).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Mean interval width in units of `s_y`.
pub fn width_regression(intervals: &[PredictionInterval], s_y: f64) -> Result<f64> {
    if !(s_y > 0.0 && s_y.is_finite()) {
        return Err(MetricsError::InvalidScale(s_y));
    }
    if intervals.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(intervals.iter().map(|i| i.width() / s_y).sum::<f64>() / intervals.len() as f64)
}

pub fn coverage_sets(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    same_len(sets.len(), labels.len())?;
    let hits = sets.iter().zip(labels).filter(|(s, y)| s.contains(**y)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean set cardinality.
pub fn width_sets(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(sets.iter().map(|s| s.len() as f64).sum::<f64>() / sets.len() as f64)
}

fn check_probs(probs: &Matrix, labels: &[usize]) -> Result<()> {
    same_len(probs.rows(), labels.len())?;
    for (row, &label) in labels.iter().enumerate() {
        if label >= probs.cols() {
            return Err(MetricsError::LabelOutOfRange { row, label });
        }
        let r = probs.row(row);
        let sum: f64 = r.iter().sum();
        if r.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(MetricsError::InvalidRow { row });
        }
    }
    Ok(())
}

/// Mean squared distance between probability vectors and one-hot labels (not divided by K).
pub fn brier(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_probs(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            probs
                .row(r)
                .iter()
                .enumerate()
                .map(|(c, p)| (p - if c == y { 1.0 } else { 0.0 }).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
}

pub fn accuracy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_probs(probs, labels)?;
    let hits = labels.iter().enumerate().filter(|(r, y)| argmax(probs.row(*r)) == **y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Expected calibration error over equal-width confidence bins
/// `((b−1)/B, b/B]` (confidence 0 falls in the first bin).
pub fn ece(probs: &Matrix, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    check_probs(probs, labels)?;
    let mut count = vec![0usize; bins];
    let mut correct = vec![0.0; bins];
    let mut confidence = vec![0.0; bins];
    for (r, &y) in labels.iter().enumerate() {
        let row = probs.row(r);
        let pred = argmax(row);
        let conf = row[pred];
        let b = ((conf * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1);
        count[b] += 1;
        confidence[b] += conf;
        if pred == y {
            correct[b] += 1.0;
        }
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct[b] / m - confidence[b] / m).abs()
        })
        .sum())
}

/// One (width, coverage) observation of a method at some shift level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthCoveragePoint {
    pub method: String,
    pub width: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AboveLine {
    pub intercept: f64,
    pub slope: f64,
    /// Per method, the fraction of its points strictly above the pooled line.
    pub fractions: BTreeMap<String, f64>,
}

/// Fits one OLS line `coverage ~ width` through all methods' points together,
/// then reports the share of each method's points strictly above it.
pub fn fraction_above_line(points: &[WidthCoveragePoint]) -> Result<AboveLine> {
    if points.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.width).sum::<f64>() / n;
    let my = points.iter().map(|p| p.coverage).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.width - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.width - mx) * (p.coverage - my)).sum();
    if sxx <= 1e-12 * (1.0 + mx * mx) * n {
        return Err(MetricsError::IdenticalWidths);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for p in points {
        let entry = tally.entry(p.method.clone()).or_default();
        entry.1 += 1;
        if p.coverage > intercept + slope * p.width {
            entry.0 += 1;
        }
    }
    Ok(AboveLine {
        intercept,
        slope,
        fractions: tally
            .into_iter()
            .map(|(m, (above, total))| (m, above as f64 / total as f64))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

/// Rank 1 is best; tied scores share the average of the ranks they span.
pub fn method_ranks(scores: &[(String, f64)], direction: Direction) -> Result<Vec<(String, f64)>> {
    if scores.len() < 2 {
        return Err(MetricsError::TooFewMethods {
            needed: 2,
            got: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (scores[a].1, scores[b].1);
        match direction {
            Direction::HigherIsBetter => y.total_cmp(&x),
            Direction::LowerIsBetter => x.total_cmp(&y),
        }
    });
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].1 == scores[order[i]].1 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    Ok(scores.iter().zip(ranks).map(|((m, _), r)| (m.clone(), r)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

/// One evaluated cell. Serialized column order: method, dataset, shift,
/// severity, alpha, coverage, width, brier, ece, accuracy, n, seed, status,
/// config_hash. Optional metrics are empty when not applicable or failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub method: String,
    pub dataset: String,
    pub shift: String,
    pub severity: String,
    pub alpha: f64,
    pub coverage: Option<f64>,
    pub width: Option<f64>,
    pub brier: Option<f64>,
    pub ece: Option<f64>,
    pub accuracy: Option<f64>,
    pub n: usize,
    pub seed: u64,
    pub status: Status,
    #[serde(default)]
    pub config_hash: String,
}

impl CoverageReport {
    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }
}

pub fn write_reports_csv<W: std::io::Write>(reports: &[CoverageReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if reports.is_empty() {
        w.write_record([
            "method", "dataset", "shift", "severity", "alpha", "coverage", "width", "brier", "ece", "accuracy", "n",
            "seed", "status", "config_hash",
        ])?;
    }
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: std::io::Read>(input: R) -> csv::Result<Vec<CoverageReport>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
