//! Ordinary least squares with the summaries needed for prediction intervals.

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::datasets::TabularDataset;
use crate::numerics::{cholesky_inverse, cholesky_solve, dot, gram_cholesky, mean, std_dev, Matrix, NumericsError};

/// Sample statistics of a single-feature fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneDimensionalSummary {
    pub x_mean: f64,
    pub x_std: f64,
    pub y_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegressionFit {
    /// Intercept first, then one slope per feature.
    pub coefficients: Vec<f64>,
    /// Residual standard error with an `n − d − 1` denominator.
    pub residual_se: f64,
    /// `(XᵀX)⁻¹` for the design with a leading column of ones.
    pub xtx_inverse: Matrix,
    pub n: usize,
    pub one_d: Option<OneDimensionalSummary>,
}

impl LinearRegressionFit {
    pub fn dim(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coefficients[0] + dot(&self.coefficients[1..], x)
    }

    /// `x̃ᵀ(XᵀX)⁻¹x̃` with `x̃ = (1, x)`.
    pub fn leverage(&self, x: &[f64]) -> f64 {
        let p = self.coefficients.len();
        let aug: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
        (0..p)
            .map(|i| aug[i] * dot(self.xtx_inverse.row(i), &aug))
            .sum::<f64>()
            .max(0.0)
    }
}

pub fn fit_linear_regression(train: &TabularDataset) -> Result<LinearRegressionFit> {
    let (n, d) = (train.len(), train.dim());
    if n <= d + 1 {
        return Err(ModelError::InsufficientData { needed: d + 1, got: n });
    }
    let p = d + 1;
    let mut gram = Matrix::zeros(p, p);
    let mut xty = vec![0.0; p];
    let mut row = vec![1.0; p];
    for r in 0..n {
        row[1..].copy_from_slice(train.features.row(r));
        for i in 0..p {
            xty[i] += row[i] * train.labels[r];
            for j in i..p {
                gram.set(i, j, gram.get(i, j) + row[i] * row[j]);
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram.set(i, j, gram.get(j, i));
        }
    }
    let l = gram_cholesky(&gram).map_err(|e| match e {
        NumericsError::NotSymmetric => NumericsError::RankDeficient,
        other => other,
    })?;
    let coefficients = cholesky_solve(&l, &xty);
    let xtx_inverse = cholesky_inverse(&l);
    let rss: f64 = (0..n)
        .map(|r| {
            let fit = coefficients[0] + dot(&coefficients[1..], train.features.row(r));
            (train.labels[r] - fit).powi(2)
        })
        .sum();
    let one_d = (d == 1).then(|| {
        let xs = train.features.column(0);
        OneDimensionalSummary {
            x_mean: mean(&xs),
            x_std: std_dev(&xs),
            y_std: std_dev(&train.labels),
        }
    });
    Ok(LinearRegressionFit {
        coefficients,
        residual_se: (rss / (n - d - 1) as f64).sqrt(),
        xtx_inverse,
        n,
        one_d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(xs: &[f64], ys: &[f64]) -> TabularDataset {
        TabularDataset::new("t", Matrix::new(xs.len(), 1, xs.to_vec()).unwrap(), ys.to_vec()).unwrap()
    }

    #[test]
    fn exact_line_has_zero_residual_error() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let fit = fit_linear_regression(&data(&xs, &xs.map(|x| 2.0 * x - 1.0))).unwrap();
        assert!((fit.coefficients[0] + 1.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        assert!(fit.residual_se < 1e-7);
    }

    #[test]
    fn intercept_only_is_the_mean() {
        let ys = vec![1.0, 4.0, 2.0, 7.0];
        let t = TabularDataset::new("t", Matrix::new(4, 0, vec![]).unwrap(), ys).unwrap();
        let fit = fit_linear_regression(&t).unwrap();
        assert!((fit.coefficients[0] - 3.5).abs() < 1e-12);
        assert!((fit.xtx_inverse.get(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn simple_regression_matches_hand_formulas() {
        let xs = [1.0, 2.0, 4.0, 5.0, 7.0, 8.5];
        let ys = [2.1, 2.9, 5.2, 5.8, 8.1, 9.0];
        let fit = fit_linear_regression(&data(&xs, &ys)).unwrap();
        // Oracle: slope = Sxy / Sxx, intercept = ȳ − slope·x̄.
        let n = xs.len() as f64;
        let xbar = xs.iter().sum::<f64>() / n;
        let ybar = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((fit.coefficients[1] - slope).abs() < 1e-12);
        assert!((fit.coefficients[0] - (ybar - slope * xbar)).abs() < 1e-12);
        // Leverage of a simple regression: 1/n + (x − x̄)²/Sxx.
        let lev = fit.leverage(&[3.3]);
        assert!((lev - (1.0 / n + (3.3 - xbar).powi(2) / sxx)).abs() < 1e-12);
        let summary = fit.one_d.unwrap();
        assert!((summary.x_mean - xbar).abs() < 1e-12);
    }

    #[test]
    fn errors_on_small_or_singular_designs() {
        assert!(matches!(
            fit_linear_regression(&data(&[1.0, 2.0], &[1.0, 2.0])),
            Err(ModelError::InsufficientData { .. })
        ));
        let x = Matrix::new(4, 2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0]).unwrap();
        let t = TabularDataset::new("t", x, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        assert!(matches!(
            fit_linear_regression(&t),
            Err(ModelError::Numerics(NumericsError::RankDeficient))
        ));
    }
}
