//! MNIST shift study: classifiers trained once on clean digits, evaluated on
//! the clean test set and on every level of the rotation, roll and corruption
//! sweeps.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uqcov::datasets::{load_idx, ImageDataset};
use uqcov::intervals::prediction_set;
use uqcov::metrics::{accuracy, brier, coverage_sets, ece, width_sets, CoverageReport, Status};
use uqcov::models::{fit_temperature, train_classifier, Classifier, ClassifierConfig, ClassifierVariant};
use uqcov::numerics::{pearson, Matrix};
use uqcov::seed::derive_seed;
use uqcov::shift::{corruption_schedule, roll_schedule, rotation_schedule, shift_distance, shift_sweep, ShiftSpec};

use crate::config::ExperimentConfig;
use crate::{write_csv, write_json, write_reports, HarnessError, Outcome, Result};

/// Method name of the temperature-scaled vanilla network.
pub const TEMPERATURE_SCALED: &str = "temp_scaling";

const VALIDATION_STREAM: u64 = 0x7661;
const NOISE_STREAM: u64 = 0x6e6f;
const PREDICT_STREAM: u64 = 0x7072;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub method: String,
    pub seed: u64,
    pub validation_accuracy: Option<f64>,
    pub temperature: Option<f64>,
    pub error: Option<String>,
}

/// Pearson correlation between per-level mean set width and roll distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthCorrelation {
    pub method: String,
    pub pearson: Option<f64>,
    pub levels: usize,
}

#[derive(Debug, Clone)]
pub struct MnistRun {
    pub reports: Vec<CoverageReport>,
    pub models: Vec<ModelSummary>,
    pub correlations: Vec<WidthCorrelation>,
}

struct TrainedModel {
    method: String,
    seed: u64,
    model: std::result::Result<Classifier, String>,
}

fn load(config: &ExperimentConfig) -> Result<(ImageDataset, ImageDataset, ImageDataset)> {
    let m = &config.mnist;
    let read = |images, labels| {
        load_idx(images, labels).map_err(|e| HarnessError::Input(format!("MNIST: {e}")))
    };
    let mut train = read(&m.train_images, &m.train_labels)?;
    let mut test = read(&m.test_images, &m.test_labels)?;
    if let Some(n) = m.train_limit {
        train = train.subset(&(0..n.min(train.len())).collect::<Vec<_>>());
    }
    if let Some(n) = m.test_limit {
        test = test.subset(&(0..n.min(test.len())).collect::<Vec<_>>());
    }
    if m.validation + 1 > train.len() {
        return Err(HarnessError::Config(format!(
            "mnist.validation = {} leaves no training images out of {}",
            m.validation,
            train.len()
        )));
    }
    if test.is_empty() {
        return Err(HarnessError::Input("MNIST test set is empty".into()));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[VALIDATION_STREAM])));
    let val = train.subset(&idx[..m.validation]);
    let fit = train.subset(&idx[m.validation..]);
    Ok((fit, val, test))
}

/// Every evaluation level in report order: clean, rotations, rolls, corruptions.
pub fn schedule(config: &ExperimentConfig, width: usize) -> Vec<ShiftSpec> {
    let m = &config.mnist;
    let mut levels = vec![ShiftSpec::Identity];
    if m.rotations {
        levels.extend(rotation_schedule());
    }
    if m.roll_step > 0 {
        levels.extend(roll_schedule(width, m.roll_step));
    }
    for &kind in &m.corruptions {
        levels.extend(corruption_schedule(kind));
    }
    levels
}

fn train_models(config: &ExperimentConfig, train: &ImageDataset, val: &ImageDataset) -> Vec<TrainedModel> {
    let m = &config.mnist;
    let train_one = |variant: ClassifierVariant| {
        let index = ClassifierVariant::ALL.iter().position(|v| *v == variant).unwrap() as u64 + 1;
        let seed = derive_seed(config.seed, &[index]);
        let cfg = ClassifierConfig {
            variant,
            seed,
            ..m.classifier.clone()
        };
        let start = Instant::now();
        let model = train_classifier(train, val, &cfg).map_err(|e| e.to_string());
        match &model {
            Ok(c) => eprintln!(
                "mnist-shift: trained {} in {:.1}s (validation accuracy {:.4})",
                variant.name(),
                start.elapsed().as_secs_f64(),
                c.validation_accuracy.unwrap_or(f64::NAN)
            ),
            Err(e) => eprintln!("mnist-shift: training {} failed: {e}", variant.name()),
        }
        TrainedModel {
            method: variant.name().into(),
            seed,
            model,
        }
    };
    let mut models: Vec<TrainedModel> = m.variants.iter().map(|&v| train_one(v)).collect();
    if m.temperature_scaling {
        let base = match models.iter().find(|t| t.method == ClassifierVariant::Vanilla.name()) {
            Some(t) => TrainedModel {
                method: TEMPERATURE_SCALED.into(),
                seed: t.seed,
                model: t.model.clone(),
            },
            None => TrainedModel {
                method: TEMPERATURE_SCALED.into(),
                ..train_one(ClassifierVariant::Vanilla)
            },
        };
        let model = base.model.and_then(|mut c| {
            let logits = c.logits(&val.images).map_err(|e| e.to_string())?;
            let t = fit_temperature(&logits, &val.labels).map_err(|e| e.to_string())?;
            eprintln!("mnist-shift: fitted temperature {t:.4}");
            c.temperature = Some(t);
            Ok(c)
        });
        models.push(TrainedModel { model, ..base });
    }
    models
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetMetrics {
    pub coverage: f64,
    pub width: f64,
    pub brier: f64,
    pub ece: f64,
    pub accuracy: f64,
}

/// Set coverage, width, Brier, ECE and accuracy of one probability matrix.
pub fn set_metrics(probs: &Matrix, labels: &[usize], alpha: f64, bins: usize) -> std::result::Result<SetMetrics, String> {
    let sets = (0..probs.rows())
        .map(|r| prediction_set(probs.row(r), alpha))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let s = |e: uqcov::metrics::MetricsError| e.to_string();
    Ok(SetMetrics {
        coverage: coverage_sets(&sets, labels).map_err(s)?,
        width: width_sets(&sets).map_err(s)?,
        brier: brier(probs, labels).map_err(s)?,
        ece: ece(probs, labels, bins).map_err(s)?,
        accuracy: accuracy(probs, labels).map_err(s)?,
    })
}

/// Correlation of width with `min(s, width − s)` over the clean level (s = 0)
/// and every roll level.
pub fn width_correlations(reports: &[CoverageReport], methods: &[String], image_width: usize) -> Vec<WidthCorrelation> {
    methods
        .iter()
        .map(|method| {
            let (d, w): (Vec<f64>, Vec<f64>) = reports
                .iter()
                .filter(|r| &r.method == method && r.is_ok())
                .filter_map(|r| {
                    let s = match r.shift.as_str() {
                        "clean" => 0,
                        "roll" => r.severity.parse::<usize>().ok()?,
                        _ => return None,
                    };
                    Some((shift_distance(s, image_width) as f64, r.width?))
                })
                .unzip();
            WidthCorrelation {
                method: method.clone(),
                pearson: if d.len() >= 3 { pearson(&d, &w).ok() } else { None },
                levels: d.len(),
            }
        })
        .collect()
}

pub fn run_mnist_shift(config: &ExperimentConfig) -> Result<MnistRun> {
    let m = &config.mnist;
    let (train, val, test) = load(config)?;
    let (_, _, width) = test.shape().expect("non-empty test set");
    let levels = schedule(config, width);
    for spec in &levels {
        spec.validate(width)
            .map_err(|e| HarnessError::Config(format!("mnist schedule: {e}")))?;
    }
    eprintln!(
        "mnist-shift: {} training, {} validation, {} test images; {} levels",
        train.len(),
        val.len(),
        test.len(),
        levels.len()
    );
    let models = train_models(config, &train, &val);
    let hash = config.hash();
    let mut reports = Vec::new();
    for spec in &levels {
        let shifted = match spec {
            ShiftSpec::Identity => test.clone(),
            _ => shift_sweep(&test, &[*spec], &config.corruptions, derive_seed(config.seed, &[NOISE_STREAM]))
                .map_err(|e| HarnessError::Config(format!("mnist schedule: {e}")))?
                .pop()
                .expect("one level")
                .1,
        };
        let (shift, severity) = spec.descriptor();
        for t in &models {
            let result = t.model.as_ref().map_err(|e| e.clone()).and_then(|model| {
                // The prediction seed depends only on the model, so identical
                // inputs (clean vs. a full-width roll) give identical outputs.
                let probs = model
                    .predict_proba(&shifted.images, derive_seed(t.seed, &[PREDICT_STREAM]))
                    .map_err(|e| e.to_string())?;
                set_metrics(&probs, &shifted.labels, config.alpha, m.ece_bins)
            });
            let report = CoverageReport {
                method: t.method.clone(),
                dataset: "mnist".into(),
                shift: shift.clone(),
                severity: severity.clone(),
                alpha: config.alpha,
                coverage: None,
                width: None,
                brier: None,
                ece: None,
                accuracy: None,
                n: shifted.len(),
                seed: t.seed,
                status: Status::Failed,
                config_hash: hash.clone(),
            };
            reports.push(match result {
                Ok(lm) => CoverageReport {
                    coverage: Some(lm.coverage),
                    width: Some(lm.width),
                    brier: Some(lm.brier),
                    ece: Some(lm.ece),
                    accuracy: Some(lm.accuracy),
                    status: Status::Ok,
                    ..report
                },
                Err(_) => report,
            });
        }
        eprintln!("mnist-shift: evaluated {shift} {severity}");
    }
    let methods: Vec<String> = models.iter().map(|t| t.method.clone()).collect();
    let correlations = if m.roll_step > 0 {
        width_correlations(&reports, &methods, width)
    } else {
        Vec::new()
    };
    let models = models
        .into_iter()
        .map(|t| ModelSummary {
            method: t.method,
            seed: t.seed,
            validation_accuracy: t.model.as_ref().ok().and_then(|c| c.validation_accuracy),
            temperature: t.model.as_ref().ok().and_then(|c| c.temperature),
            error: t.model.err(),
        })
        .collect();
    Ok(MnistRun {
        reports,
        models,
        correlations,
    })
}

pub fn cmd_mnist_shift(config: &ExperimentConfig) -> Result<Outcome> {
    let run = run_mnist_shift(config)?;
    let dir = config.out.join("mnist_shift");
    let mut outcome = Outcome {
        failed_cells: run.reports.iter().filter(|r| !r.is_ok()).count(),
        ..Outcome::default()
    };
    outcome.files.push(write_reports(&dir.join("reports.csv"), &run.reports)?);
    outcome.files.push(write_json(&dir.join("models.json"), &run.models)?);
    if !run.correlations.is_empty() {
        for c in &run.correlations {
            eprintln!(
                "mnist-shift: {:>12} width-distance correlation {}",
                c.method,
                c.pearson.map_or("n/a".into(), |p| format!("{p:.3}"))
            );
        }
        outcome.files.push(write_csv(&dir.join("correlations.csv"), &run.correlations)?);
    }
    Ok(outcome)
}
