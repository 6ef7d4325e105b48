//! 1−α prediction intervals (regression) and minimal prediction sets (classification).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{GaussianPrediction, LinearRegressionFit};
use crate::numerics::{normal_quantile, quantile, t_quantile, NumericsError};

/// Allowed deviation of a probability vector's sum from 1 before it is rejected.
pub const PROBABILITY_TOLERANCE: f64 = 1e-4;
/// Slack when comparing accumulated mass with 1−α, absorbing summation rounding.
const MASS_SLACK: f64 = 1e-12;
/// Fewer samples than this give unreliable tail quantiles.
pub const MIN_RECOMMENDED_SAMPLES: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum IntervalError {
    #[error("no samples")]
    Empty,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("negative or non-finite variance {0}")]
    InvalidVariance(f64),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("probability {index} is negative or non-finite: {value}")]
    InvalidProbability { index: usize, value: f64 },
    #[error("probabilities sum to {0}, more than 1e-4 away from 1")]
    BadSum(f64),
    #[error("input has {got} features, fit expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, IntervalError>;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(IntervalError::InvalidAlpha(alpha))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
}

impl PredictionInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Closed-interval membership.
    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// Member classes in the order they were added (descending probability).
    pub classes: Vec<usize>,
    pub alpha: f64,
    pub accumulated_mass: f64,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }
}

/// Empirical α/2 and 1−α/2 quantiles of the samples.
pub fn interval_from_samples(samples: &[f64], alpha: f64) -> Result<PredictionInterval> {
    check_alpha(alpha)?;
    if samples.is_empty() {
        return Err(IntervalError::Empty);
    }
    let mut sorted = samples.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite(0).into());
    }
    sorted.sort_by(f64::total_cmp);
    Ok(PredictionInterval {
        lower: quantile(&sorted, alpha / 2.0)?,
        upper: quantile(&sorted, 1.0 - alpha / 2.0)?,
        alpha,
    })
}

/// `mean ± z_{1−α/2}·sqrt(epistemic + aleatoric)`.
pub fn interval_from_gaussian(pred: &GaussianPrediction, alpha: f64) -> Result<PredictionInterval> {
    check_alpha(alpha)?;
    for v in [pred.epistemic_variance, pred.aleatoric_variance] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(IntervalError::InvalidVariance(v));
        }
    }
    let half = normal_quantile(1.0 - alpha / 2.0)? * pred.total_variance().sqrt();
    Ok(PredictionInterval {
        lower: pred.mean - half,
        upper: pred.mean + half,
        alpha,
    })
}

/// Classical OLS prediction interval
/// `ŷ ± t_{n−d−1, 1−α/2} · s · sqrt(1 + x̃ᵀ(XᵀX)⁻¹x̃)`.
///
/// For a single feature this equals
/// `ŷ ± t_{n−2} · s · sqrt(1 + 1/n + (x−x̄)²/((n−1)s_x²))`.
pub fn lr_interval(fit: &LinearRegressionFit, x: &[f64], alpha: f64) -> Result<PredictionInterval> {
    check_alpha(alpha)?;
    if x.len() != fit.dim() {
        return Err(IntervalError::Dimension {
            expected: fit.dim(),
            got: x.len(),
        });
    }
    let df = (fit.n - fit.dim() - 1) as f64;
    let half = t_quantile(1.0 - alpha / 2.0, df)? * fit.residual_se * (1.0 + fit.leverage(x)).sqrt();
    let y = fit.predict(x);
    Ok(PredictionInterval {
        lower: y - half,
        upper: y + half,
        alpha,
    })
}

/// The simple-regression band `ŷ ± t_{n−2}·s_y·sqrt(1/n + (x−x̄)²/((n−1)s_x²))`,
/// written with the label standard deviation and without the observation-noise
/// term. It is narrower than a prediction interval and is kept for comparison;
/// [`lr_interval`] is the one used for coverage.
pub fn lr_mean_band(fit: &LinearRegressionFit, x: f64, alpha: f64) -> Result<PredictionInterval> {
    check_alpha(alpha)?;
    let s = fit.one_d.ok_or(IntervalError::Dimension {
        expected: fit.dim(),
        got: 1,
    })?;
    let n = fit.n as f64;
    let half = t_quantile(1.0 - alpha / 2.0, n - 2.0)?
        * s.y_std
        * (1.0 / n + (x - s.x_mean).powi(2) / ((n - 1.0) * s.x_std * s.x_std)).sqrt();
    let y = fit.predict(&[x]);
    Ok(PredictionInterval {
        lower: y - half,
        upper: y + half,
        alpha,
    })
}

/// Validates a probability vector and returns it renormalized to sum to 1.
pub fn normalize_probabilities(probs: &[f64]) -> Result<Vec<f64>> {
    if probs.len() < 2 {
        return Err(IntervalError::TooFewClasses(probs.len()));
    }
    if let Some((index, &value)) = probs.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
        return Err(IntervalError::InvalidProbability { index, value });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(IntervalError::BadSum(sum));
    }
    Ok(probs.iter().map(|p| p / sum).collect())
}

/// Smallest set of classes whose probabilities reach 1−α: classes are taken in
/// descending probability, equal probabilities by ascending class index.
pub fn prediction_set(probs: &[f64], alpha: f64) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    let p = normalize_probabilities(probs)?;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let target = 1.0 - alpha - MASS_SLACK;
    let mut mass = 0.0;
    let mut classes = Vec::new();
    for c in order {
        classes.push(c);
        mass += p[c];
        if mass >= target {
            break;
        }
    }
    Ok(PredictionSet {
        classes,
        alpha,
        accumulated_mass: mass,
    })
}
