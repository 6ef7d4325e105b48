//! Exact Gaussian-process regression with a squared-exponential kernel.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::{GaussianPrediction, ModelError, Result};
use crate::datasets::TabularDataset;
use crate::numerics::{cholesky, cholesky_inverse, cholesky_solve, dot, forward_substitute, Matrix, NumericsError};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Prior mean of the latent function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpMean {
    Zero,
    #[default]
    TrainingMean,
}

/// `k(x, x') = amplitude · exp(−½ Σ_d ((x_d − x'_d) / ℓ_d)²)`; a single
/// lengthscale is shared by all dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpHyperparameters {
    /// Signal variance σ_f² (the prior variance far from data).
    pub amplitude: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl GpHyperparameters {
    fn validate(&self, dim: usize) -> Result<()> {
        let ok = self.amplitude > 0.0
            && self.noise_variance > 0.0
            && self.amplitude.is_finite()
            && self.noise_variance.is_finite()
            && (self.lengthscales.len() == 1 || self.lengthscales.len() == dim)
            && self.lengthscales.iter().all(|l| *l > 0.0 && l.is_finite());
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!(
                "GP hyperparameters must be positive with 1 or {dim} lengthscales: {self:?}"
            )))
        }
    }

    fn lengthscale(&self, d: usize) -> f64 {
        if self.lengthscales.len() == 1 {
            self.lengthscales[0]
        } else {
            self.lengthscales[d]
        }
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .enumerate()
            .map(|(d, (x, y))| ((x - y) / self.lengthscale(d)).powi(2))
            .sum();
        self.amplitude * (-0.5 * r2).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    /// Maximize the log marginal likelihood; otherwise use the median heuristic.
    pub optimize: bool,
    /// One lengthscale per feature instead of a shared one (optimization only).
    pub ard: bool,
    pub max_train: usize,
    pub mean: GpMean,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fixed hyperparameters; bypasses both the heuristic and optimization.
    pub hyperparameters: Option<GpHyperparameters>,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            optimize: true,
            ard: false,
            max_train: 2000,
            mean: GpMean::TrainingMean,
            iterations: 100,
            learning_rate: 0.05,
            seed: 0,
            hyperparameters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpFit {
    pub hyperparameters: GpHyperparameters,
    pub mean_offset: f64,
    pub inputs: Matrix,
    /// Training labels minus `mean_offset`.
    pub targets: Vec<f64>,
    /// Lower Cholesky factor of `K + (σ² + jitter)·I`.
    pub cholesky: Matrix,
    pub alpha: Vec<f64>,
    pub jitter: f64,
    pub log_marginal_likelihood: f64,
}

impl GpFit {
    /// Conditions the GP on `(inputs, labels)` with fixed hyperparameters.
    pub fn fit(inputs: Matrix, labels: &[f64], hyperparameters: GpHyperparameters, mean: GpMean) -> Result<Self> {
        hyperparameters.validate(inputs.cols())?;
        if inputs.rows() == 0 || inputs.rows() != labels.len() {
            return Err(ModelError::InsufficientData {
                needed: 0,
                got: inputs.rows(),
            });
        }
        let mean_offset = match mean {
            GpMean::Zero => 0.0,
            GpMean::TrainingMean => labels.iter().sum::<f64>() / labels.len() as f64,
        };
        let targets: Vec<f64> = labels.iter().map(|y| y - mean_offset).collect();
        let k = kernel_matrix(&inputs, &hyperparameters);
        let (cholesky, jitter) = factor(&k, hyperparameters.noise_variance)?;
        let alpha = cholesky_solve(&cholesky, &targets);
        let log_marginal_likelihood = lml(&cholesky, &targets, &alpha);
        Ok(Self {
            hyperparameters,
            mean_offset,
            inputs,
            targets,
            cholesky,
            alpha,
            jitter,
            log_marginal_likelihood,
        })
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn predict(&self, x: &[f64]) -> Result<GaussianPrediction> {
        if x.len() != self.dim() {
            return Err(ModelError::InputDimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let h = &self.hyperparameters;
        let kstar: Vec<f64> = (0..self.inputs.rows())
            .map(|i| h.kernel(self.inputs.row(i), x))
            .collect();
        let v = forward_substitute(&self.cholesky, &kstar);
        Ok(GaussianPrediction {
            mean: self.mean_offset + dot(&kstar, &self.alpha),
            epistemic_variance: (h.amplitude - dot(&v, &v)).max(0.0),
            aleatoric_variance: h.noise_variance,
        })
    }

    pub fn predict_batch(&self, xs: &Matrix) -> Result<Vec<GaussianPrediction>> {
        (0..xs.rows())
            .into_par_iter()
            .map(|r| self.predict(xs.row(r)))
            .collect()
    }
}

fn kernel_matrix(x: &Matrix, h: &GpHyperparameters) -> Matrix {
    let n = x.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k.set(i, i, h.amplitude);
        for j in 0..i {
            let v = h.kernel(x.row(i), x.row(j));
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    k
}

/// Cholesky of `k + noise·I`, escalating diagonal jitter on failure.
fn factor(k: &Matrix, noise: f64) -> Result<(Matrix, f64)> {
    let n = k.rows();
    let mut jitter = 0.0;
    loop {
        let mut a = k.clone();
        for i in 0..n {
            a.set(i, i, a.get(i, i) + noise + jitter);
        }
        match cholesky(&a) {
            Ok(l) => return Ok((l, jitter)),
            Err(NumericsError::NotPositiveDefinite { .. }) => {
                jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
                if jitter > JITTER_MAX * (1.0 + 1e-9) {
                    return Err(ModelError::CholeskyFailed { jitter: JITTER_MAX });
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn lml(l: &Matrix, y: &[f64], alpha: &[f64]) -> f64 {
    let n = y.len() as f64;
    let logdet: f64 = (0..l.rows()).map(|i| l.get(i, i).ln()).sum();
    -0.5 * dot(y, alpha) - logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Median pairwise Euclidean distance (at most 1000 points are used).
pub fn median_distance(x: &Matrix) -> f64 {
    let n = x.rows().min(1000);
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..i {
            let r2: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            d.push(r2.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Log marginal likelihood and its gradient in log-parameters
/// `(ln amplitude, ln ℓ_1.., ln noise)`.
fn lml_gradient(x: &Matrix, y: &[f64], h: &GpHyperparameters) -> Result<(f64, Vec<f64>)> {
    let n = x.rows();
    let k = kernel_matrix(x, h);
    let (l, _) = factor(&k, h.noise_variance)?;
    let alpha = cholesky_solve(&l, y);
    let value = lml(&l, y, &alpha);
    let kinv = cholesky_inverse(&l);
    let m = h.lengthscales.len();
    let mut grad = vec![0.0; m + 2];
    let mut ls2 = vec![0.0; x.cols()];
    for (d, v) in ls2.iter_mut().enumerate() {
        *v = h.lengthscale(d).powi(2);
    }
    for i in 0..n {
        for j in 0..=i {
            let w = alpha[i] * alpha[j] - kinv.get(i, j);
            let weight = if i == j { 0.5 } else { 1.0 };
            let kf = k.get(i, j);
            grad[0] += weight * w * kf;
            if i == j {
                grad[m + 1] += 0.5 * w * h.noise_variance;
                continue;
            }
            let (xi, xj) = (x.row(i), x.row(j));
            if m == 1 {
                let r2: f64 = (0..x.cols()).map(|d| (xi[d] - xj[d]).powi(2) / ls2[d]).sum();
                grad[1] += w * kf * r2;
            } else {
                for d in 0..m {
                    grad[1 + d] += w * kf * (xi[d] - xj[d]).powi(2) / ls2[d];
                }
            }
        }
    }
    Ok((value, grad))
}

fn optimize(x: &Matrix, y: &[f64], init: GpHyperparameters, config: &GpConfig) -> GpHyperparameters {
    let m = init.lengthscales.len();
    let mut theta: Vec<f64> = std::iter::once(init.amplitude.ln())
        .chain(init.lengthscales.iter().map(|l| l.ln()))
        .chain(std::iter::once(init.noise_variance.ln()))
        .collect();
    let unpack = |t: &[f64]| GpHyperparameters {
        amplitude: t[0].exp(),
        lengthscales: t[1..=m].iter().map(|v| v.exp()).collect(),
        noise_variance: t[m + 1].exp(),
    };
    let mut adam = Adam::new(config.learning_rate, &[theta.len()]);
    let mut best = (f64::NEG_INFINITY, init.clone());
    for _ in 0..config.iterations {
        let h = unpack(&theta);
        let Ok((value, grad)) = lml_gradient(x, y, &h) else {
            break;
        };
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            break;
        }
        if value > best.0 {
            best = (value, h);
        }
        let ascent: Vec<f64> = grad.iter().map(|g| -g).collect();
        adam.begin_step();
        adam.update(0, &mut theta, &ascent);
        // Keep the search in a numerically sane box (labels are unit scale here).
        theta[0] = theta[0].clamp(-10.0, 10.0);
        for t in &mut theta[1..=m] {
            *t = t.clamp(-7.0, 7.0);
        }
        theta[m + 1] = theta[m + 1].clamp(-13.8, 3.0);
    }
    if let Ok((value, _)) = lml_gradient(x, y, &unpack(&theta)) {
        if value > best.0 {
            best = (value, unpack(&theta));
        }
    }
    best.1
}

/// Fits a GP to (standardized-feature) training data; above `max_train` rows
/// a seeded random subsample is used.
pub fn train_gp(train: &TabularDataset, config: &GpConfig) -> Result<GpFit> {
    if train.is_empty() {
        return Err(ModelError::InsufficientData { needed: 0, got: 0 });
    }
    if config.max_train == 0 {
        return Err(ModelError::InvalidConfig("max_train must be positive".into()));
    }
    let data = if train.len() > config.max_train {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        idx.truncate(config.max_train);
        idx.sort_unstable();
        train.subset(&idx)
    } else {
        train.clone()
    };
    let hyper = match &config.hyperparameters {
        Some(h) => h.clone(),
        None => {
            let offset = match config.mean {
                GpMean::Zero => 0.0,
                GpMean::TrainingMean => data.labels.iter().sum::<f64>() / data.len() as f64,
            };
            let centered: Vec<f64> = data.labels.iter().map(|y| y - offset).collect();
            let var = centered.iter().map(|v| v * v).sum::<f64>() / centered.len() as f64;
            let scale = if var > 0.0 && var.is_finite() { var } else { 1.0 };
            let ell = median_distance(&data.features);
            let lengthscales = if config.ard && config.optimize {
                vec![ell; data.dim().max(1)]
            } else {
                vec![ell]
            };
            let unit = GpHyperparameters {
                amplitude: 1.0,
                lengthscales,
                noise_variance: 0.1,
            };
            let unit = if config.optimize {
                let scaled: Vec<f64> = centered.iter().map(|v| v / scale.sqrt()).collect();
                optimize(&data.features, &scaled, unit, config)
            } else {
                unit
            };
            GpHyperparameters {
                amplitude: unit.amplitude * scale,
                lengthscales: unit.lengthscales,
                noise_variance: unit.noise_variance * scale,
            }
        }
    };
    GpFit::fit(data.features, &data.labels, hyper, config.mean)
}

pub fn gp_predict(gp: &GpFit, x: &[f64]) -> Result<GaussianPrediction> {
    gp.predict(x)
}
