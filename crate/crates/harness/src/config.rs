//! Experiment configuration: a TOML file with one section per subcommand.
//! Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uqcov::models::{ClassifierConfig, ClassifierVariant, GpConfig, SearchSpace};
use uqcov::shift::{CorruptionKind, CorruptionTable};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Miscoverage level; intervals and sets target `1 − alpha`.
    pub alpha: f64,
    /// Base seed; every cell derives its own seed from it.
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
    pub regress: RegressConfig,
    pub mnist: MnistConfig,
    pub setcov: SetcovConfig,
    pub analyze: AnalyzeConfig,
    /// Severity tables for the parametric corruptions.
    pub corruptions: CorruptionTable,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            seed: 0,
            out: PathBuf::from("results"),
            threads: 0,
            regress: RegressConfig::default(),
            mnist: MnistConfig::default(),
            setcov: SetcovConfig::default(),
            analyze: AnalyzeConfig::default(),
            corruptions: CorruptionTable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub path: PathBuf,
    /// `last`, a zero-based column index, or a header name.
    #[serde(default = "default_target")]
    pub target: String,
}

fn default_target() -> String {
    "last".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressMethod {
    LinearRegression,
    Gp,
    Svi,
    LlSvi,
    Ensemble,
    Dropout,
    LlDropout,
}

impl RegressMethod {
    pub const ALL: [RegressMethod; 7] = [
        Self::LinearRegression,
        Self::Gp,
        Self::Svi,
        Self::LlSvi,
        Self::Ensemble,
        Self::Dropout,
        Self::LlDropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LinearRegression => "linear_regression",
            Self::Gp => "gp",
            Self::Svi => "svi",
            Self::LlSvi => "ll_svi",
            Self::Ensemble => "ensemble",
            Self::Dropout => "dropout",
            Self::LlDropout => "ll_dropout",
        }
    }

    /// Whether the method trains networks from the searched configuration.
    pub fn needs_search(self) -> bool {
        !matches!(self, Self::LinearRegression | Self::Gp)
    }
}

/// Variational settings not covered by the searched MLP configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SviSettings {
    pub prior_sigma: f64,
    pub kl_weight: f64,
    pub init_rho: f64,
    pub init_noise_std: f64,
}

impl Default for SviSettings {
    fn default() -> Self {
        Self {
            prior_sigma: 1.0,
            kl_weight: 1.0,
            init_rho: -3.0,
            init_noise_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressConfig {
    pub datasets: Vec<DatasetEntry>,
    pub methods: Vec<RegressMethod>,
    pub split_seeds: Vec<u64>,
    pub split_fractions: (f64, f64, f64),
    pub search_trials: usize,
    pub ensemble_size: usize,
    pub dropout_passes: usize,
    pub svi_samples: usize,
    pub search: SearchSpace,
    pub gp: GpConfig,
    pub svi: SviSettings,
}

impl Default for RegressConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            methods: RegressMethod::ALL.to_vec(),
            split_seeds: (0..20).collect(),
            split_fractions: (0.72, 0.18, 0.10),
            search_trials: 100,
            ensemble_size: 40,
            dropout_passes: 200,
            svi_samples: 100,
            search: SearchSpace::default(),
            gp: GpConfig::default(),
            svi: SviSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnistConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Training images held out for validation accuracy and temperature fitting.
    pub validation: usize,
    /// Use only the first `n` training / test images.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub variants: Vec<ClassifierVariant>,
    /// Also report the vanilla network calibrated by temperature scaling.
    pub temperature_scaling: bool,
    /// Shared settings; `variant` and `seed` are set per model.
    pub classifier: ClassifierConfig,
    pub rotations: bool,
    /// Roll step in pixels; 0 disables the roll sweep.
    pub roll_step: usize,
    pub corruptions: Vec<CorruptionKind>,
    pub ece_bins: usize,
}

impl Default for MnistConfig {
    fn default() -> Self {
        let dir = Path::new("data/mnist-desk");
        Self {
            train_images: dir.join("train-images-idx3-ubyte.gz"),
            train_labels: dir.join("train-labels-idx1-ubyte.gz"),
            test_images: dir.join("test-images-idx3-ubyte.gz"),
            test_labels: dir.join("test-labels-idx1-ubyte.gz"),
            validation: 1000,
            train_limit: None,
            test_limit: None,
            variants: ClassifierVariant::ALL.to_vec(),
            temperature_scaling: true,
            classifier: ClassifierConfig::default(),
            rotations: true,
            roll_step: 2,
            corruptions: Vec::new(),
            ece_bins: uqcov::metrics::DEFAULT_ECE_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetcovConfig {
    pub files: Vec<PathBuf>,
    /// Files hold logits rather than probabilities.
    pub logits: bool,
    pub ece_bins: usize,
}

impl Default for SetcovConfig {
    fn default() -> Self {
        Self {
            files: Vec::new(),
            logits: false,
            ece_bins: uqcov::metrics::DEFAULT_ECE_BINS,
        }
    }
}

/// How report rows are pooled into levels for the above-line analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    /// Pool every shift type at the same severity (corruption levels 1–5).
    #[default]
    Severity,
    /// Keep shift types apart (rotation degrees and roll pixels are not comparable).
    ShiftSeverity,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub reports: Vec<PathBuf>,
    pub group_by: GroupBy,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        let r = &self.regress;
        for (name, v) in [
            ("regress.search_trials", r.search_trials),
            ("regress.ensemble_size", r.ensemble_size),
            ("regress.dropout_passes", r.dropout_passes),
            ("mnist.ece_bins", self.mnist.ece_bins),
            ("setcov.ece_bins", self.setcov.ece_bins),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if r.svi_samples < 2 {
            return bad("regress.svi_samples must be at least 2".into());
        }
        let (a, b, c) = r.split_fractions;
        if !(a > 0.0 && b > 0.0 && c > 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
            return bad(format!("regress.split_fractions must be positive and sum to 1, got {:?}", r.split_fractions));
        }
        r.search
            .validate()
            .map_err(|e| HarnessError::Config(format!("regress.search: {e}")))?;
        let m = &self.mnist;
        if m.classifier.mc_passes == 0 || m.classifier.ensemble_size == 0 || m.classifier.epochs == 0 {
            return bad("mnist.classifier counts must be positive".into());
        }
        if m.variants.is_empty() && !m.temperature_scaling {
            return bad("mnist.variants is empty".into());
        }
        if m.validation == 0 && m.temperature_scaling {
            return bad("temperature scaling needs mnist.validation > 0".into());
        }
        Ok(())
    }

    /// Short digest of every setting that can change results (not `out` or `threads`).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        canonical.threads = 0;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
