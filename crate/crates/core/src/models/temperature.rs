//! Post-hoc temperature scaling of classifier logits.

use super::{ModelError, Result};
use crate::numerics::Matrix;

pub const MIN_TEMPERATURE: f64 = 0.05;
pub const MAX_TEMPERATURE: f64 = 20.0;
const TOLERANCE: f64 = 1e-4;

fn nll(logits: &Matrix, labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v / t));
        let lse = max + row.iter().map(|v| (v / t - max).exp()).sum::<f64>().ln();
        total += lse - row[y] / t;
    }
    total / labels.len() as f64
}

/// Temperature minimizing validation NLL, found by golden-section search on
/// ln T over [ln 0.05, ln 20].
pub fn fit_temperature(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || logits.rows() != labels.len() {
        return Err(ModelError::InvalidConfig(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(ModelError::InvalidConfig(format!("label {y} out of range")));
    }
    if logits.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(ModelError::InvalidConfig("non-finite logits".into()));
    }
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let f = |u: f64| nll(logits, labels, u.exp());
    let (mut a, mut b) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    Ok((0.5 * (a + b)).exp().clamp(MIN_TEMPERATURE, MAX_TEMPERATURE))
}

/// Row-wise softmax of `logits / t`.
pub fn apply_temperature(logits: &Matrix, t: f64) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v / t));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v / t - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn unit_temperature_is_plain_softmax() {
        let logits = Matrix::from_rows(&[[1.0, 2.0, 0.5], [-3.0, 0.0, 3.0]]).unwrap();
        let p = apply_temperature(&logits, 1.0);
        for r in 0..2 {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                assert!((p.get(r, c) - row[c].exp() / z).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn huge_temperature_is_nearly_uniform() {
        let logits = Matrix::from_rows(&[[5.0, -2.0, 0.0, 1.0]]).unwrap();
        let p = apply_temperature(&logits, 1e9);
        assert!(p.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-8));
    }

    #[test]
    fn recovers_unit_temperature_for_calibrated_logits() {
        // Labels drawn from softmax(logits) make T = 1 the population NLL minimizer.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (n, k) = (200_000, 5);
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..k)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    2.0 * e
                })
                .collect();
            let m = Matrix::from_rows(&[z.clone()]).unwrap();
            let p = apply_temperature(&m, 1.0);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let y = (0..k)
                .find(|&c| {
                    acc += p.get(0, c);
                    u < acc
                })
                .unwrap_or(k - 1);
            rows.push(z);
            labels.push(y);
        }
        let logits = Matrix::from_rows(&rows).unwrap();
        let t = fit_temperature(&logits, &labels).unwrap();
        assert!((t - 1.0).abs() < 1e-2, "fitted {t}");

        // Sharpening the same logits should be undone by a matching temperature.
        let sharp = Matrix::new(n, k, logits.as_slice().iter().map(|v| 3.0 * v).collect()).unwrap();
        let t3 = fit_temperature(&sharp, &labels).unwrap();
        assert!((t3 - 3.0).abs() < 0.05, "fitted {t3}");
    }

    #[test]
    fn stays_within_bounds() {
        // Perfectly separable logits push T to the lower bound.
        let logits = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let t = fit_temperature(&logits, &[0, 1]).unwrap();
        assert!((MIN_TEMPERATURE..=MIN_TEMPERATURE * 1.001).contains(&t));
        assert!(fit_temperature(&logits, &[0]).is_err());
    }
}
