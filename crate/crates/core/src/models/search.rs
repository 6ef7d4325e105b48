//! Random hyperparameter search scored by validation RMSE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{train_mlp, DropoutPlacement, MlpConfig};
use super::{ModelError, Result};
use crate::datasets::TabularDataset;
use crate::seed::derive_seed;

/// Bounds sampled by [`random_search`]; a bound pair with equal ends is a fixed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub hidden_layers: Vec<usize>,
    /// Units per hidden layer, log-uniform; all hidden layers share the width.
    pub units: (usize, usize),
    /// Log-uniform.
    pub learning_rate: (f64, f64),
    /// Uniform.
    pub dropout: (f64, f64),
    pub batch_sizes: Vec<usize>,
    /// Uniform over integers.
    pub epochs: (usize, usize),
    /// Log-uniform when the lower bound is positive, else uniform.
    pub weight_decay: (f64, f64),
    pub placement: DropoutPlacement,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            hidden_layers: vec![1, 2, 3],
            units: (16, 256),
            learning_rate: (1e-4, 1e-2),
            dropout: (0.05, 0.5),
            batch_sizes: vec![32, 64, 128],
            epochs: (40, 400),
            weight_decay: (0.0, 0.0),
            placement: DropoutPlacement::All,
        }
    }
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo.ln()..=hi.ln()).exp().clamp(lo, hi)
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(format!("search space: {m}")));
        if self.hidden_layers.is_empty() || self.hidden_layers.contains(&0) {
            return bad("hidden_layers must list positive depths");
        }
        if self.units.0 == 0 || self.units.0 > self.units.1 {
            return bad("units bounds must satisfy 0 < lo ≤ hi");
        }
        if !(self.learning_rate.0 > 0.0 && self.learning_rate.0 <= self.learning_rate.1) {
            return bad("learning_rate bounds must satisfy 0 < lo ≤ hi");
        }
        if !(self.dropout.0 >= 0.0 && self.dropout.0 <= self.dropout.1 && self.dropout.1 < 1.0) {
            return bad("dropout bounds must lie in [0, 1)");
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return bad("batch_sizes must list positive sizes");
        }
        if self.epochs.0 > self.epochs.1 {
            return bad("epochs bounds must satisfy lo ≤ hi");
        }
        if !(self.weight_decay.0 >= 0.0 && self.weight_decay.0 <= self.weight_decay.1) {
            return bad("weight_decay bounds must satisfy 0 ≤ lo ≤ hi");
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng, seed: u64) -> MlpConfig {
        let depth = self.hidden_layers[rng.random_range(0..self.hidden_layers.len())];
        let width = log_uniform(rng, (self.units.0 as f64, self.units.1 as f64)).round() as usize;
        let weight_decay = if self.weight_decay.0 > 0.0 {
            log_uniform(rng, self.weight_decay)
        } else {
            uniform(rng, self.weight_decay)
        };
        MlpConfig {
            hidden: vec![width.clamp(self.units.0, self.units.1); depth],
            learning_rate: log_uniform(rng, self.learning_rate),
            dropout: uniform(rng, self.dropout),
            batch_size: self.batch_sizes[rng.random_range(0..self.batch_sizes.len())],
            epochs: rng.random_range(self.epochs.0..=self.epochs.1),
            weight_decay,
            placement: self.placement,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub config: MlpConfig,
    pub validation_rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: MlpConfig,
    pub best_rmse: f64,
    pub trials: Vec<TrialRecord>,
}

/// Samples `trials` configurations (all drawn up front, so the sequence is
/// independent of thread scheduling), trains each, and keeps the one with the
/// lowest validation RMSE; ties go to the earlier trial.
pub fn random_search(
    train: &TabularDataset,
    val: &TabularDataset,
    trials: usize,
    space: &SearchSpace,
    seed: u64,
) -> Result<SearchOutcome> {
    space.validate()?;
    if trials == 0 {
        return Err(ModelError::InvalidConfig("at least one trial is required".into()));
    }
    if val.is_empty() {
        return Err(ModelError::InsufficientData { needed: 0, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs: Vec<MlpConfig> = (0..trials)
        .map(|i| space.sample(&mut rng, derive_seed(seed, &[i as u64])))
        .collect();
    let records: Vec<TrialRecord> = configs
        .into_par_iter()
        .enumerate()
        .map(|(index, config)| match train_mlp(train, val, &config) {
            Ok(model) => TrialRecord {
                index,
                config,
                validation_rmse: model.validation_rmse,
                error: None,
            },
            Err(e) => TrialRecord {
                index,
                config,
                validation_rmse: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let (best, best_rmse) = records
        .iter()
        .filter_map(|r| r.validation_rmse.map(|s| (r, s)))
        .fold(None::<(&TrialRecord, f64)>, |acc, (r, s)| match acc {
            Some((_, b)) if b <= s => acc,
            _ => Some((r, s)),
        })
        .ok_or(ModelError::AllTrialsFailed)?;
    Ok(SearchOutcome {
        best: best.config.clone(),
        best_rmse,
        trials: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sorted_quantile, Matrix};

    fn data(n: usize, offset: usize) -> TabularDataset {
        let xs: Vec<f64> = (0..n).map(|i| ((i + offset) as f64 * 0.37).sin() * 2.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x - 1.0).collect();
        TabularDataset::new("q", Matrix::new(n, 1, xs).unwrap(), ys).unwrap()
    }

    fn small_space() -> SearchSpace {
        SearchSpace {
            units: (4, 16),
            epochs: (2, 10),
            ..SearchSpace::default()
        }
    }

    #[test]
    fn single_trial_returns_its_sample() {
        let out = random_search(&data(60, 0), &data(20, 100), 1, &small_space(), 5).unwrap();
        assert_eq!(out.trials.len(), 1);
        assert_eq!(out.best, out.trials[0].config);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(out.best, small_space().sample(&mut rng, derive_seed(5, &[0])));
    }

    #[test]
    fn collapsed_space_returns_the_point() {
        let space = SearchSpace {
            hidden_layers: vec![2],
            units: (8, 8),
            learning_rate: (3e-3, 3e-3),
            dropout: (0.1, 0.1),
            batch_sizes: vec![16],
            epochs: (5, 5),
            weight_decay: (1e-4, 1e-4),
            placement: DropoutPlacement::LastLayer,
        };
        let out = random_search(&data(60, 0), &data(20, 100), 3, &space, 1).unwrap();
        let b = &out.best;
        assert_eq!(b.hidden, vec![8, 8]);
        assert_eq!((b.learning_rate, b.dropout, b.batch_size, b.epochs, b.weight_decay), (3e-3, 0.1, 16, 5, 1e-4));
    }

    #[test]
    fn champion_beats_the_median_and_samples_respect_bounds() {
        let space = small_space();
        let out = random_search(&data(80, 0), &data(30, 100), 12, &space, 2).unwrap();
        let mut scores: Vec<f64> = out.trials.iter().filter_map(|t| t.validation_rmse).collect();
        scores.sort_by(f64::total_cmp);
        assert!(out.best_rmse <= sorted_quantile(&scores, 0.5));
        for t in &out.trials {
            let c = &t.config;
            assert!(space.hidden_layers.contains(&c.hidden.len()));
            assert!(c.hidden.iter().all(|&u| (4..=16).contains(&u)));
            assert!((1e-4..=1e-2).contains(&c.learning_rate));
            assert!((0.05..=0.5).contains(&c.dropout));
            assert!((2..=10).contains(&c.epochs));
        }
        let again = random_search(&data(80, 0), &data(30, 100), 12, &space, 2).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn all_failed_trials_are_an_error() {
        let mut train = data(30, 0);
        train.labels[3] = f64::NAN;
        let err = random_search(&train, &data(10, 50), 3, &small_space(), 0).unwrap_err();
        assert!(matches!(err, ModelError::AllTrialsFailed));
    }
}
