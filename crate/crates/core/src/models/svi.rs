//! Mean-field Gaussian variational network (Bayes by backprop) for regression,
//! with a learned homoskedastic observation noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{backward, build_layers, forward, rmse, Dense, MlpConfig, Workspace};
use super::optim::Adam;
use super::{GaussianPrediction, ModelError, Result};
use crate::datasets::TabularDataset;
use crate::numerics::{mean, std_dev, variance, Matrix};
use crate::seed::derive_seed;

/// Weight draws used to score each epoch on the validation rows.
const VALIDATION_SAMPLES: usize = 10;

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SviConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// L2 penalty on deterministic layers (last-layer variant only).
    pub weight_decay: f64,
    pub prior_sigma: f64,
    /// Multiplier on the KL term of the ELBO.
    pub kl_weight: f64,
    /// Initial pre-softplus posterior scale (softplus(-3) ≈ 0.049).
    pub init_rho: f64,
    /// Initial observation noise standard deviation, in standardized label units.
    pub init_noise_std: f64,
    /// Keep the epoch with the lowest validation predictive NLL.
    pub early_stopping: bool,
    pub seed: u64,
}

impl Default for SviConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50],
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            weight_decay: 0.0,
            prior_sigma: 1.0,
            kl_weight: 1.0,
            init_rho: -3.0,
            init_noise_std: 0.5,
            early_stopping: true,
            seed: 0,
        }
    }
}

impl SviConfig {
    /// Reuses the architecture and optimizer settings of a searched MLP config.
    pub fn from_mlp(config: &MlpConfig) -> Self {
        Self {
            hidden: config.hidden.clone(),
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            epochs: config.epochs,
            weight_decay: config.weight_decay,
            seed: config.seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = !self.hidden.is_empty()
            && !self.hidden.contains(&0)
            && self.learning_rate > 0.0
            && self.batch_size > 0
            && self.prior_sigma > 0.0
            && self.kl_weight >= 0.0
            && self.weight_decay >= 0.0
            && self.init_noise_std > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!("invalid SVI config {self:?}")))
        }
    }
}

fn draw(mu: &[f64], rho: &[f64], dst: &mut [f64], rng: &mut impl Rng, mut keep: Option<&mut Vec<f64>>) {
    if let Some(k) = keep.as_deref_mut() {
        k.clear();
    }
    for i in 0..mu.len() {
        let e: f64 = StandardNormal.sample(rng);
        dst[i] = mu[i] + softplus(rho[i]) * e;
        if let Some(k) = keep.as_deref_mut() {
            k.push(e);
        }
    }
}

/// Factorized Gaussian posterior over one dense layer: σ = softplus(ρ).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLayer {
    pub mean: Dense,
    pub rho_weights: Vec<f64>,
    pub rho_bias: Vec<f64>,
    pub prior_sigma: f64,
}

impl VariationalLayer {
    fn new(mean: Dense, rho: f64, prior_sigma: f64) -> Self {
        Self {
            rho_weights: vec![rho; mean.weights.len()],
            rho_bias: vec![rho; mean.bias.len()],
            mean,
            prior_sigma,
        }
    }

    /// Writes `μ + σ·ε` into `out`, recording `ε` when buffers are given.
    fn sample_into(&self, out: &mut Dense, rng: &mut impl Rng, eps: Option<(&mut Vec<f64>, &mut Vec<f64>)>) {
        let (ew, eb) = match eps {
            Some((w, b)) => (Some(w), Some(b)),
            None => (None, None),
        };
        draw(&self.mean.weights, &self.rho_weights, &mut out.weights, rng, ew);
        draw(&self.mean.bias, &self.rho_bias, &mut out.bias, rng, eb);
    }

    /// KL(q ‖ N(0, σ_p²)) summed over the layer's weights.
    pub fn kl(&self) -> f64 {
        let sp = self.prior_sigma;
        let term = |mu: f64, rho: f64| {
            let s = softplus(rho);
            (sp / s).ln() + (s * s + mu * mu) / (2.0 * sp * sp) - 0.5
        };
        self.mean.weights.iter().zip(&self.rho_weights).map(|(m, r)| term(*m, *r)).sum::<f64>()
            + self.mean.bias.iter().zip(&self.rho_bias).map(|(m, r)| term(*m, *r)).sum::<f64>()
    }

    pub fn posterior_sigmas(&self) -> impl Iterator<Item = f64> + '_ {
        self.rho_weights.iter().chain(&self.rho_bias).map(|r| softplus(*r))
    }
}

/// Trained variational regressor. The network is `deterministic` layers
/// followed by `variational` layers; the last-layer variant has exactly one
/// variational layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SviRegressor {
    pub deterministic: Vec<Dense>,
    pub variational: Vec<VariationalLayer>,
    /// ln σ of the observation noise in standardized label units.
    pub log_noise_std: f64,
    pub label_mean: f64,
    pub label_std: f64,
    pub validation_rmse: Option<f64>,
}

impl SviRegressor {
    pub fn inputs(&self) -> usize {
        self.deterministic
            .first()
            .unwrap_or(&self.variational[0].mean)
            .inputs
    }

    pub fn is_last_layer_only(&self) -> bool {
        !self.deterministic.is_empty()
    }

    pub fn kl(&self) -> f64 {
        self.variational.iter().map(VariationalLayer::kl).sum()
    }

    /// Observation noise variance in original label units.
    pub fn noise_variance(&self) -> f64 {
        (2.0 * self.log_noise_std).exp() * self.label_std * self.label_std
    }

    fn buffers(&self) -> Vec<Dense> {
        self.deterministic
            .iter()
            .cloned()
            .chain(self.variational.iter().map(|v| v.mean.clone()))
            .collect()
    }

    /// Predictive distribution for every row, using `mc_samples` weight draws
    /// shared across rows; draw `s` is seeded by `(seed, s)`.
    pub fn predict_batch(&self, xs: &Matrix, mc_samples: usize, seed: u64) -> Result<Vec<GaussianPrediction>> {
        if mc_samples < 2 {
            return Err(ModelError::InvalidConfig("need at least 2 MC samples".into()));
        }
        if xs.cols() != self.inputs() {
            return Err(ModelError::InputDimension {
                expected: self.inputs(),
                got: xs.cols(),
            });
        }
        let n = xs.rows();
        let det = self.deterministic.len();
        // The deterministic trunk is evaluated once per row.
        let trunk: Option<Vec<Vec<f64>>> = (det > 0).then(|| {
            let layers = self.deterministic_with_head();
            let mut ws = Workspace::new(&layers);
            (0..n)
                .map(|r| {
                    forward(&layers, xs.row(r), &mut ws);
                    ws.last_hidden().to_vec()
                })
                .collect()
        });
        let draws: Vec<Vec<f64>> = (0..mc_samples)
            .into_par_iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[s as u64]));
                let mut layers = self.buffers();
                for (k, v) in self.variational.iter().enumerate() {
                    v.sample_into(&mut layers[det + k], &mut rng, None);
                }
                match &trunk {
                    Some(features) => {
                        let head = &layers[layers.len() - 1];
                        features
                            .iter()
                            .map(|h| head.bias[0] + h.iter().zip(&head.weights).map(|(a, w)| a * w).sum::<f64>())
                            .collect()
                    }
                    None => {
                        let mut ws = Workspace::new(&layers);
                        (0..n).map(|r| forward(&layers, xs.row(r), &mut ws)).collect()
                    }
                }
            })
            .collect();
        let noise = self.noise_variance();
        Ok((0..n)
            .map(|r| {
                let values: Vec<f64> = draws.iter().map(|d| d[r]).collect();
                GaussianPrediction {
                    mean: self.label_mean + self.label_std * mean(&values),
                    epistemic_variance: variance(&values) * self.label_std * self.label_std,
                    aleatoric_variance: noise,
                }
            })
            .collect())
    }

    /// Deterministic layers plus a placeholder head, so the shared forward
    /// pass leaves the last hidden activations in the workspace.
    fn deterministic_with_head(&self) -> Vec<Dense> {
        let mut layers = self.deterministic.clone();
        layers.push(self.variational[self.variational.len() - 1].mean.zeros_like());
        layers
    }
}

/// Trains with the reparameterization trick: one weight draw per minibatch,
/// minimizing mean NLL + kl_weight·KL/N.
pub fn train_svi(
    train: &TabularDataset,
    val: &TabularDataset,
    config: &SviConfig,
    last_layer_only: bool,
) -> Result<SviRegressor> {
    config.validate()?;
    if train.len() < 2 {
        return Err(ModelError::InsufficientData { needed: 1, got: train.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let label_mean = mean(&train.labels);
    let label_std = match std_dev(&train.labels) {
        s if s > 0.0 && s.is_finite() => s,
        _ => 1.0,
    };
    let z: Vec<f64> = train.labels.iter().map(|y| (y - label_mean) / label_std).collect();
    let mut layers = build_layers(train.dim(), &config.hidden, &mut rng);
    let split = if last_layer_only { layers.len() - 1 } else { 0 };
    let variational: Vec<VariationalLayer> = layers
        .split_off(split)
        .into_iter()
        .map(|d| VariationalLayer::new(d, config.init_rho, config.prior_sigma))
        .collect();
    let mut model = SviRegressor {
        deterministic: layers,
        variational,
        log_noise_std: config.init_noise_std.ln(),
        label_mean,
        label_std,
        validation_rmse: None,
    };

    let det = model.deterministic.len();
    let mut segments: Vec<usize> = model
        .deterministic
        .iter()
        .flat_map(|l| [l.weights.len(), l.bias.len()])
        .collect();
    for v in &model.variational {
        segments.extend([v.mean.weights.len(), v.mean.bias.len(), v.mean.weights.len(), v.mean.bias.len()]);
    }
    segments.push(1);
    let mut adam = Adam::new(config.learning_rate, &segments);

    let mut sampled = model.buffers();
    let mut grads: Vec<Dense> = sampled.iter().map(Dense::zeros_like).collect();
    let mut eps: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); model.variational.len()];
    let mut ws = Workspace::new(&sampled);
    let kl_coef = config.kl_weight / train.len() as f64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, SviRegressor)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut nll = 0.0;
        for batch in order.chunks(config.batch_size) {
            for (k, layer) in model.deterministic.iter().enumerate() {
                sampled[k].weights.copy_from_slice(&layer.weights);
                sampled[k].bias.copy_from_slice(&layer.bias);
            }
            for (k, v) in model.variational.iter().enumerate() {
                let (ew, eb) = &mut eps[k];
                v.sample_into(&mut sampled[det + k], &mut rng, Some((ew, eb)));
            }
            for g in grads.iter_mut() {
                g.weights.fill(0.0);
                g.bias.fill(0.0);
            }
            let noise_var = (2.0 * model.log_noise_std).exp();
            let scale = 1.0 / batch.len() as f64;
            let mut grad_log_noise = 0.0;
            for &i in batch {
                let f = forward(&sampled, train.features.row(i), &mut ws);
                let r2 = (z[i] - f).powi(2);
                nll += 0.5 * r2 / noise_var + model.log_noise_std;
                grad_log_noise += (1.0 - r2 / noise_var) * scale;
                backward(&sampled, &mut ws, (f - z[i]) / noise_var * scale, &mut grads);
            }

            adam.begin_step();
            let mut seg = 0;
            for (layer, grad) in model.deterministic.iter_mut().zip(&mut grads) {
                if config.weight_decay > 0.0 {
                    grad.weights
                        .iter_mut()
                        .zip(&layer.weights)
                        .for_each(|(g, w)| *g += config.weight_decay * w);
                }
                adam.update(seg, &mut layer.weights, &grad.weights);
                adam.update(seg + 1, &mut layer.bias, &grad.bias);
                seg += 2;
            }
            let sp2 = config.prior_sigma * config.prior_sigma;
            for (k, v) in model.variational.iter_mut().enumerate() {
                let grad = &grads[det + k];
                let (ew, eb) = &eps[k];
                let mu_grad = |g: &[f64], mu: &[f64]| -> Vec<f64> {
                    g.iter().zip(mu).map(|(g, m)| g + kl_coef * m / sp2).collect()
                };
                let rho_grad = |g: &[f64], e: &[f64], rho: &[f64]| -> Vec<f64> {
                    g.iter()
                        .zip(e)
                        .zip(rho)
                        .map(|((g, e), r)| {
                            let s = softplus(*r);
                            (g * e + kl_coef * (s / sp2 - 1.0 / s)) * sigmoid(*r)
                        })
                        .collect()
                };
                let gmw = mu_grad(&grad.weights, &v.mean.weights);
                let gmb = mu_grad(&grad.bias, &v.mean.bias);
                let grw = rho_grad(&grad.weights, ew, &v.rho_weights);
                let grb = rho_grad(&grad.bias, eb, &v.rho_bias);
                adam.update(seg, &mut v.mean.weights, &gmw);
                adam.update(seg + 1, &mut v.mean.bias, &gmb);
                adam.update(seg + 2, &mut v.rho_weights, &grw);
                adam.update(seg + 3, &mut v.rho_bias, &grb);
                seg += 4;
            }
            let mut log_noise = [model.log_noise_std];
            adam.update(seg, &mut log_noise, &[grad_log_noise]);
            model.log_noise_std = log_noise[0].max(-9.0);
        }
        let elbo = -(nll / train.len() as f64 + kl_coef * model.kl());
        if !elbo.is_finite() {
            return Err(ModelError::Diverged { epoch });
        }
        if config.early_stopping && !val.is_empty() {
            let nll = validation_nll(&model, val, derive_seed(config.seed, &[2]))?;
            if best.as_ref().is_none_or(|(b, _)| nll < *b) {
                best = Some((nll, model.clone()));
            }
        }
    }
    if let Some((_, snapshot)) = best {
        model = snapshot;
    }

    if !val.is_empty() {
        let preds = model.predict_batch(&val.features, 30, derive_seed(config.seed, &[1]))?;
        let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        model.validation_rmse = Some(rmse(&means, &val.labels));
    }
    Ok(model)
}

/// Mean Gaussian negative log predictive density on `val`, with a fixed
/// weight-draw seed so epochs are compared on common random numbers.
fn validation_nll(model: &SviRegressor, val: &TabularDataset, seed: u64) -> Result<f64> {
    let preds = model.predict_batch(&val.features, VALIDATION_SAMPLES, seed)?;
    let total: f64 = preds
        .iter()
        .zip(&val.labels)
        .map(|(p, y)| {
            let v = p.total_variance().max(f64::MIN_POSITIVE);
            0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (y - p.mean).powi(2) / v)
        })
        .sum();
    Ok(total / val.len() as f64)
}

/// Predictive distribution for one input; equivalent to a one-row batch.
pub fn svi_predict(model: &SviRegressor, x: &[f64], mc_samples: usize, seed: u64) -> Result<GaussianPrediction> {
    let xs = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(model.predict_batch(&xs, mc_samples, seed)?[0])
}
