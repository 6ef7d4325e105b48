//! Rectifier MLP regressor trained with Adam, plus MC dropout and deep ensembles.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::{ModelError, Result};
use crate::datasets::TabularDataset;
use crate::numerics::{std_dev, Matrix, SampleVector};
use crate::seed::derive_seed;

/// Which hidden layers apply dropout (during training and MC prediction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPlacement {
    #[default]
    All,
    LastLayer,
}

/// Hyperparameters of a rectifier MLP. The activation is always ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub placement: DropoutPlacement,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50],
            dropout: 0.0,
            placement: DropoutPlacement::All,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive and non-empty");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout rate must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        Ok(())
    }
}

/// Fully connected layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub(crate) fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = (gain / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect::<Vec<f64>>();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    #[inline]
    pub(crate) fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *slot = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn clear(&mut self) {
        self.weights.fill(0.0);
        self.bias.fill(0.0);
    }
}

/// Per-sample scratch space: activations, backprop deltas and dropout masks.
pub(crate) struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    /// One entry per hidden layer; empty means no dropout on that layer.
    pub(crate) masks: Vec<Vec<f64>>,
}

impl Workspace {
    pub(crate) fn new(layers: &[Dense]) -> Self {
        let mut acts = vec![vec![0.0; layers[0].inputs]];
        acts.extend(layers.iter().map(|l| vec![0.0; l.outputs]));
        Self {
            acts,
            deltas: layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            masks: vec![Vec::new(); layers.len() - 1],
        }
    }

    pub(crate) fn sample_masks(&mut self, layers: &[Dense], active: &[bool], rate: f64, rng: &mut impl Rng) {
        let keep = 1.0 - rate;
        for (h, mask) in self.masks.iter_mut().enumerate() {
            mask.clear();
            if active[h] && rate > 0.0 {
                mask.extend(
                    (0..layers[h].outputs)
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }),
                );
            }
        }
    }

    pub(crate) fn clear_masks(&mut self) {
        self.masks.iter_mut().for_each(Vec::clear);
    }

    /// Activations of the last hidden layer from the most recent forward pass.
    pub(crate) fn last_hidden(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }
}

/// Forward pass of a ReLU network with a scalar linear output.
pub(crate) fn forward(layers: &[Dense], x: &[f64], ws: &mut Workspace) -> f64 {
    ws.acts[0].copy_from_slice(x);
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let (lo, hi) = ws.acts.split_at_mut(l + 1);
        let out = &mut hi[0];
        layer.forward(&lo[l], out);
        if l < last {
            let mask = &ws.masks[l];
            if mask.is_empty() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            } else {
                out.iter_mut().zip(mask).for_each(|(v, m)| *v = v.max(0.0) * m);
            }
        }
    }
    ws.acts[layers.len()][0]
}

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output) = `g`,
/// using the activations stored by the preceding `forward` call.
pub(crate) fn backward(layers: &[Dense], ws: &mut Workspace, g: f64, grads: &mut [Dense]) {
    let last = layers.len() - 1;
    ws.deltas[last][0] = g;
    for l in (0..layers.len()).rev() {
        let (lower, upper) = ws.deltas.split_at_mut(l);
        let delta = &upper[0];
        let input = &ws.acts[l];
        let layer = &layers[l];
        let grad = &mut grads[l];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.bias[o] += d;
            let row = &mut grad.weights[o * layer.inputs..(o + 1) * layer.inputs];
            row.iter_mut().zip(input).for_each(|(gw, a)| *gw += d * a);
        }
        if l > 0 {
            let prev = &mut lower[l - 1];
            prev.fill(0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
            }
            let mask = &ws.masks[l - 1];
            for (i, p) in prev.iter_mut().enumerate() {
                if input[i] <= 0.0 {
                    *p = 0.0;
                } else if !mask.is_empty() {
                    *p *= mask[i];
                }
            }
        }
    }
}

pub(crate) fn build_layers(inputs: usize, hidden: &[usize], rng: &mut impl Rng) -> Vec<Dense> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut fan_in = inputs;
    for &h in hidden {
        layers.push(Dense::init(fan_in, h, 2.0, rng));
        fan_in = h;
    }
    layers.push(Dense::init(fan_in, 1, 1.0, rng));
    layers
}

/// Trained point-prediction network. Labels are modelled in standardized
/// units internally; predictions come back in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub(crate) layers: Vec<Dense>,
    pub dropout: f64,
    pub placement: DropoutPlacement,
    pub label_mean: f64,
    pub label_std: f64,
    pub validation_rmse: Option<f64>,
}

impl Mlp {
    /// Randomly initialized network without dropout and with identity label scaling.
    pub fn new(inputs: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            layers: build_layers(inputs, hidden, &mut rng),
            dropout: 0.0,
            placement: DropoutPlacement::All,
            label_mean: 0.0,
            label_std: 1.0,
            validation_rmse: None,
        }
    }

    pub(crate) fn from_parts(layers: Vec<Dense>, dropout: f64, placement: DropoutPlacement, label_mean: f64, label_std: f64) -> Self {
        Self {
            layers,
            dropout,
            placement,
            label_mean,
            label_std,
            validation_rmse: None,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flattened parameters: per layer, weights then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                params.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn active_layers(&self) -> Vec<bool> {
        let n = self.layers.len() - 1;
        (0..n)
            .map(|h| match self.placement {
                DropoutPlacement::All => true,
                DropoutPlacement::LastLayer => h + 1 == n,
            })
            .collect()
    }

    /// Deterministic prediction (dropout off) in original label units.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut ws = Workspace::new(&self.layers);
        self.label_mean + self.label_std * forward(&self.layers, x, &mut ws)
    }

    pub fn predict_batch(&self, xs: &Matrix) -> Vec<f64> {
        let mut ws = Workspace::new(&self.layers);
        (0..xs.rows())
            .map(|r| self.label_mean + self.label_std * forward(&self.layers, xs.row(r), &mut ws))
            .collect()
    }

    /// Mean squared error of the raw network output against `y` and its
    /// gradient with respect to `parameters()`. No dropout, no label scaling.
    pub fn loss_and_gradient(&self, x: &Matrix, y: &[f64]) -> (f64, Vec<f64>) {
        let mut ws = Workspace::new(&self.layers);
        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        let n = y.len() as f64;
        let mut loss = 0.0;
        for (r, &target) in y.iter().enumerate() {
            let err = forward(&self.layers, x.row(r), &mut ws) - target;
            loss += err * err / n;
            backward(&self.layers, &mut ws, 2.0 * err / n, &mut grads);
        }
        let flat = grads
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
            .collect();
        (loss, flat)
    }
}

fn label_scaling(labels: &[f64]) -> (f64, f64) {
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let std = if labels.len() > 1 { std_dev(labels) } else { 0.0 };
    (mean, if std > 0.0 && std.is_finite() { std } else { 1.0 })
}

pub(crate) fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    (pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
}

/// Trains an MLP on standardized features with Adam on mean squared error.
pub fn train_mlp(train: &TabularDataset, val: &TabularDataset, config: &MlpConfig) -> Result<Mlp> {
    config.validate()?;
    if train.is_empty() {
        return Err(ModelError::InsufficientData { needed: 0, got: 0 });
    }
    if !val.is_empty() && val.dim() != train.dim() {
        return Err(ModelError::InputDimension {
            expected: train.dim(),
            got: val.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (label_mean, label_std) = label_scaling(&train.labels);
    let mut model = Mlp::from_parts(
        build_layers(train.dim(), &config.hidden, &mut rng),
        config.dropout,
        config.placement,
        label_mean,
        label_std,
    );
    let z: Vec<f64> = train.labels.iter().map(|y| (y - label_mean) / label_std).collect();

    let segments: Vec<usize> = model
        .layers
        .iter()
        .flat_map(|l| [l.weights.len(), l.bias.len()])
        .collect();
    let mut adam = Adam::new(config.learning_rate, &segments);
    let mut grads: Vec<Dense> = model.layers.iter().map(Dense::zeros_like).collect();
    let mut ws = Workspace::new(&model.layers);
    let active = model.active_layers();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.iter_mut().for_each(Dense::clear);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                ws.sample_masks(&model.layers, &active, config.dropout, &mut rng);
                let err = forward(&model.layers, train.features.row(i), &mut ws) - z[i];
                epoch_loss += err * err;
                backward(&model.layers, &mut ws, 2.0 * err * scale, &mut grads);
            }
            adam.begin_step();
            for (k, (layer, grad)) in model.layers.iter_mut().zip(&mut grads).enumerate() {
                if config.weight_decay > 0.0 {
                    grad.weights
                        .iter_mut()
                        .zip(&layer.weights)
                        .for_each(|(g, w)| *g += config.weight_decay * w);
                }
                adam.update(2 * k, &mut layer.weights, &grad.weights);
                adam.update(2 * k + 1, &mut layer.bias, &grad.bias);
            }
        }
        if !epoch_loss.is_finite() {
            return Err(ModelError::Diverged { epoch });
        }
    }

    if !val.is_empty() {
        let score = rmse(&model.predict_batch(&val.features), &val.labels);
        if !score.is_finite() {
            return Err(ModelError::Diverged {
                epoch: config.epochs,
            });
        }
        model.validation_rmse = Some(score);
    }
    Ok(model)
}

/// Stochastic forward passes with dropout left on, for a single input.
/// Equivalent to row 0 of [`mc_dropout_predict_batch`].
pub fn mc_dropout_predict(model: &Mlp, x: &[f64], passes: usize, seed: u64) -> Result<SampleVector> {
    mc_dropout_row(model, x, passes, seed, 0)
}

/// MC dropout samples for every row of `xs`; row `r` draws its masks from
/// stream `r` of the seeded generator, so results do not depend on threading.
pub fn mc_dropout_predict_batch(model: &Mlp, xs: &Matrix, passes: usize, seed: u64) -> Result<Vec<SampleVector>> {
    (0..xs.rows())
        .into_par_iter()
        .map(|r| mc_dropout_row(model, xs.row(r), passes, seed, r as u64))
        .collect()
}

fn mc_dropout_row(model: &Mlp, x: &[f64], passes: usize, seed: u64, stream: u64) -> Result<SampleVector> {
    if model.dropout <= 0.0 {
        return Err(ModelError::NoDropout);
    }
    if x.len() != model.inputs() {
        return Err(ModelError::InputDimension {
            expected: model.inputs(),
            got: x.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let layers = &model.layers;
    let mut ws = Workspace::new(layers);
    let keep = 1.0 - model.dropout;
    let samples = match model.placement {
        DropoutPlacement::All => {
            let active = model.active_layers();
            (0..passes)
                .map(|_| {
                    ws.sample_masks(layers, &active, model.dropout, &mut rng);
                    forward(layers, x, &mut ws)
                })
                .collect::<Vec<_>>()
        }
        DropoutPlacement::LastLayer => {
            // Only the final hidden layer is stochastic: run the rest once.
            ws.clear_masks();
            forward(layers, x, &mut ws);
            let hidden = ws.last_hidden().to_vec();
            let head = &layers[layers.len() - 1];
            (0..passes)
                .map(|_| {
                    head.bias[0]
                        + hidden
                            .iter()
                            .zip(&head.weights)
                            .map(|(a, w)| if rng.random::<f64>() < keep { a * w / keep } else { 0.0 })
                            .sum::<f64>()
                })
                .collect()
        }
    };
    let samples = samples
        .into_iter()
        .map(|s| model.label_mean + model.label_std * s)
        .collect();
    Ok(SampleVector::new(samples)?)
}

/// Trains `size` independent members; member `i` uses a seed derived from `(seed, i)`.
pub fn train_ensemble(
    train: &TabularDataset,
    val: &TabularDataset,
    config: &MlpConfig,
    size: usize,
    seed: u64,
) -> Result<Vec<Mlp>> {
    if size == 0 {
        return Err(ModelError::InvalidConfig("ensemble size must be positive".into()));
    }
    (0..size)
        .into_par_iter()
        .map(|i| {
            let member = MlpConfig {
                seed: derive_seed(seed, &[i as u64]),
                ..config.clone()
            };
            train_mlp(train, val, &member)
        })
        .collect()
}

/// One point prediction per member, in member order.
pub fn ensemble_predict(models: &[Mlp], x: &[f64]) -> Result<SampleVector> {
    Ok(SampleVector::new(models.iter().map(|m| m.predict(x)).collect())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ols_fit;

    fn linear_data(n: usize, seed: u64) -> TabularDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                3.0 * x + 1.0 + 0.05 * e
            })
            .collect();
        TabularDataset::new("line", Matrix::new(n, 1, xs).unwrap(), ys).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = Mlp::new(1, &[3], 7);
        assert_eq!(model.num_parameters(), 10);
        let x = Matrix::new(3, 1, vec![0.3, -1.2, 0.8]).unwrap();
        let y = [0.5, -0.1, 1.0];
        let (_, grad) = model.loss_and_gradient(&x, &y);
        let params = model.parameters();
        let h = 1e-6;
        for k in 0..params.len() {
            let mut probe = model.clone();
            let mut p = params.clone();
            p[k] += h;
            probe.set_parameters(&p).unwrap();
            let up = probe.loss_and_gradient(&x, &y).0;
            p[k] -= 2.0 * h;
            probe.set_parameters(&p).unwrap();
            let down = probe.loss_and_gradient(&x, &y).0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-6 * fd.abs().max(1.0), "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn learns_linear_data() {
        let train = linear_data(300, 1);
        let val = linear_data(100, 2);
        let config = MlpConfig {
            hidden: vec![16],
            epochs: 60,
            learning_rate: 1e-2,
            ..MlpConfig::default()
        };
        let model = train_mlp(&train, &val, &config).unwrap();
        let s_y = std_dev(&val.labels);
        // Oracle: the OLS residual error on the same validation data.
        let design = Matrix::new(
            val.len(),
            2,
            val.features.as_slice().iter().flat_map(|&x| [1.0, x]).collect(),
        )
        .unwrap();
        let beta = ols_fit(&design, &val.labels).unwrap();
        let ols: Vec<f64> = (0..val.len()).map(|r| beta[0] + beta[1] * val.features.get(r, 0)).collect();
        let ols_rmse = rmse(&ols, &val.labels);
        let got = model.validation_rmse.unwrap();
        assert!(got < 0.1 * s_y, "rmse {got}, s_y {s_y}, ols {ols_rmse}");
        assert!(got < 3.0 * ols_rmse + 0.05);
    }

    #[test]
    fn zero_epochs_keeps_initialization_and_training_is_deterministic() {
        let train = linear_data(50, 3);
        let config = MlpConfig {
            hidden: vec![4, 4],
            epochs: 0,
            seed: 11,
            ..MlpConfig::default()
        };
        let model = train_mlp(&train, &train, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let init = build_layers(1, &[4, 4], &mut rng);
        assert_eq!(model.layers, init);

        let config = MlpConfig { epochs: 5, dropout: 0.2, ..config };
        let a = train_mlp(&train, &train, &config).unwrap();
        let b = train_mlp(&train, &train, &config).unwrap();
        assert_eq!(a.parameters(), b.parameters());
    }

    #[test]
    fn divergence_names_the_epoch() {
        let mut train = linear_data(20, 4);
        train.labels[0] = f64::INFINITY;
        let err = train_mlp(&train, &train, &MlpConfig::default()).unwrap_err();
        assert!(matches!(err, ModelError::Diverged { epoch: 0 }), "{err}");
    }

    #[test]
    fn mc_dropout_rejects_zero_rate_and_is_deterministic() {
        let train = linear_data(80, 5);
        let plain = train_mlp(&train, &train, &MlpConfig { epochs: 3, ..MlpConfig::default() }).unwrap();
        assert!(matches!(mc_dropout_predict(&plain, &[0.1], 10, 0), Err(ModelError::NoDropout)));

        for placement in [DropoutPlacement::All, DropoutPlacement::LastLayer] {
            let config = MlpConfig {
                hidden: vec![8, 8],
                epochs: 3,
                dropout: 0.3,
                placement,
                ..MlpConfig::default()
            };
            let model = train_mlp(&train, &train, &config).unwrap();
            let a = mc_dropout_predict(&model, &[0.1], 200, 9).unwrap();
            let b = mc_dropout_predict(&model, &[0.1], 200, 9).unwrap();
            assert_eq!(a.len(), 200);
            assert_eq!(&*a, &*b);
            assert!(a.iter().any(|&v| v != a[0]));
            let xs = Matrix::new(2, 1, vec![0.1, 0.5]).unwrap();
            let batch = mc_dropout_predict_batch(&model, &xs, 200, 9).unwrap();
            assert_eq!(&*batch[0], &*a);
        }
    }

    #[test]
    fn ensembles_stack_member_predictions() {
        let constant = |c: f64| {
            let mut m = Mlp::new(1, &[1], 0);
            m.set_parameters(&[0.0, 0.0, 0.0, c]).unwrap();
            m
        };
        let s = ensemble_predict(&[constant(1.0), constant(3.0)], &[0.7]).unwrap();
        assert_eq!(&*s, &[1.0, 3.0]);

        let train = linear_data(40, 6);
        let same = train_mlp(&train, &train, &MlpConfig { epochs: 2, ..MlpConfig::default() }).unwrap();
        let s = ensemble_predict(&[same.clone(), same.clone(), same], &[0.2]).unwrap();
        assert!(s.iter().all(|&v| v == s[0]));

        let members = train_ensemble(&train, &train, &MlpConfig { epochs: 2, ..MlpConfig::default() }, 3, 1).unwrap();
        let again = train_ensemble(&train, &train, &MlpConfig { epochs: 2, ..MlpConfig::default() }, 3, 1).unwrap();
        assert_eq!(members, again);
        assert_ne!(members[0].parameters(), members[1].parameters());
    }
}
