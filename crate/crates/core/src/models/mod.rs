//! Uncertainty-quantification methods: point predictors, ensembles, MC dropout,
//! variational networks, Gaussian processes, linear regression and classifiers.

pub mod checkpoint;
pub mod classifier;
pub mod gp;
pub mod linear;
pub mod mlp;
pub mod optim;
pub mod search;
pub mod svi;
pub mod temperature;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use classifier::{train_classifier, Architecture, Classifier, ClassifierConfig, ClassifierVariant, ConvNet};
pub use gp::{gp_predict, train_gp, GpConfig, GpFit, GpHyperparameters, GpMean};
pub use linear::{fit_linear_regression, LinearRegressionFit};
pub use mlp::{
    ensemble_predict, mc_dropout_predict, mc_dropout_predict_batch, train_ensemble, train_mlp,
    DropoutPlacement, Mlp, MlpConfig,
};
pub use search::{random_search, SearchOutcome, SearchSpace, TrialRecord};
pub use svi::{svi_predict, train_svi, SviConfig, SviRegressor, VariationalLayer};
pub use temperature::{apply_temperature, fit_temperature};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("MC dropout needs a model trained with dropout rate > 0")]
    NoDropout,
    #[error("every search trial failed")]
    AllTrialsFailed,
    #[error("Cholesky factorization failed even with jitter {jitter:e}")]
    CholeskyFailed { jitter: f64 },
    #[error("need more than {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("input has {got} features, model expects {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Predictive distribution split into model (epistemic) and noise (aleatoric) parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: f64,
    pub epistemic_variance: f64,
    pub aleatoric_variance: f64,
}

impl GaussianPrediction {
    pub fn total_variance(&self) -> f64 {
        self.epistemic_variance + self.aleatoric_variance
    }
}
