//! Tabular regression benchmark: for every dataset × split seed, one random
//! search on train/validation, then each method's test intervals.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use uqcov::datasets::{load_tabular, make_splits, Standardizer, TabularDataset, TargetColumn};
use uqcov::intervals::{interval_from_gaussian, interval_from_samples, lr_interval, PredictionInterval};
use uqcov::metrics::{coverage_intervals, width_regression, CoverageReport, Status};
use uqcov::models::{
    ensemble_predict, fit_linear_regression, mc_dropout_predict_batch, random_search, train_ensemble, train_gp,
    train_mlp, train_svi, DropoutPlacement, GpConfig, MlpConfig, SearchOutcome, SviConfig,
};
use uqcov::numerics::{mean, std_dev};
use uqcov::seed::derive_seed;

use crate::config::{ExperimentConfig, RegressConfig, RegressMethod};
use crate::{create_dir, write_csv, write_json, write_reports, HarnessError, Outcome, Result};

/// Everything one (dataset, split seed) cell produced.
#[derive(Debug)]
pub struct CellResult {
    pub reports: Vec<CoverageReport>,
    pub search: Option<std::result::Result<SearchOutcome, String>>,
}

/// Per-method mean and standard deviation of coverage and width; `dataset`
/// is `all` for the across-dataset aggregate of per-dataset means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub dataset: String,
    pub coverage_mean: Option<f64>,
    pub coverage_std: Option<f64>,
    pub width_mean: Option<f64>,
    pub width_std: Option<f64>,
    pub ok: usize,
    pub failed: usize,
}

pub struct Split {
    pub train: TabularDataset,
    pub val: TabularDataset,
    pub test: TabularDataset,
    /// Training-label standard deviation, the width unit.
    pub s_y: f64,
}

/// Shuffled split with features standardized on the training rows.
pub fn prepare_split(data: &TabularDataset, seed: u64, fractions: (f64, f64, f64)) -> Result<Split> {
    let spec = make_splits(data.len(), seed, fractions).map_err(|e| HarnessError::Input(format!("{}: {e}", data.name)))?;
    let train = data.subset(&spec.train);
    let scaler = Standardizer::fit(&train);
    Ok(Split {
        train: scaler.apply(&train),
        val: scaler.apply(&data.subset(&spec.val)),
        test: scaler.apply(&data.subset(&spec.test)),
        s_y: scaler.label_std,
    })
}

fn method_index(method: RegressMethod) -> u64 {
    RegressMethod::ALL.iter().position(|m| *m == method).unwrap() as u64 + 1
}

/// Test intervals of one method; the error string ends up in stderr.
pub fn method_intervals(
    method: RegressMethod,
    split: &Split,
    best: Option<&MlpConfig>,
    cfg: &RegressConfig,
    alpha: f64,
    seed: u64,
) -> std::result::Result<Vec<PredictionInterval>, String> {
    let test = &split.test.features;
    let rows = || (0..test.rows()).map(|r| test.row(r));
    let searched = || best.cloned().ok_or_else(|| "random search produced no configuration".to_string());
    let svi_config = |best: MlpConfig| SviConfig {
        prior_sigma: cfg.svi.prior_sigma,
        kl_weight: cfg.svi.kl_weight,
        init_rho: cfg.svi.init_rho,
        init_noise_std: cfg.svi.init_noise_std,
        ..SviConfig::from_mlp(&MlpConfig { seed, ..best })
    };
    let s = |e: &dyn std::fmt::Display| e.to_string();
    match method {
        RegressMethod::LinearRegression => {
            let fit = fit_linear_regression(&split.train).map_err(|e| s(&e))?;
            rows().map(|x| lr_interval(&fit, x, alpha).map_err(|e| s(&e))).collect()
        }
        RegressMethod::Gp => {
            let gp = train_gp(&split.train, &GpConfig { seed, ..cfg.gp.clone() }).map_err(|e| s(&e))?;
            let preds = gp.predict_batch(test).map_err(|e| s(&e))?;
            preds.iter().map(|p| interval_from_gaussian(p, alpha).map_err(|e| s(&e))).collect()
        }
        RegressMethod::Svi | RegressMethod::LlSvi => {
            let model = train_svi(&split.train, &split.val, &svi_config(searched()?), method == RegressMethod::LlSvi)
                .map_err(|e| s(&e))?;
            let preds = model
                .predict_batch(test, cfg.svi_samples, derive_seed(seed, &[1]))
                .map_err(|e| s(&e))?;
            preds.iter().map(|p| interval_from_gaussian(p, alpha).map_err(|e| s(&e))).collect()
        }
        RegressMethod::Ensemble => {
            let member = MlpConfig {
                dropout: 0.0,
                ..searched()?
            };
            let members = train_ensemble(&split.train, &split.val, &member, cfg.ensemble_size, seed).map_err(|e| s(&e))?;
            rows()
                .map(|x| {
                    let samples = ensemble_predict(&members, x).map_err(|e| s(&e))?;
                    interval_from_samples(&samples, alpha).map_err(|e| s(&e))
                })
                .collect()
        }
        RegressMethod::Dropout | RegressMethod::LlDropout => {
            let placement = if method == RegressMethod::Dropout {
                DropoutPlacement::All
            } else {
                DropoutPlacement::LastLayer
            };
            let config = MlpConfig {
                placement,
                seed,
                ..searched()?
            };
            let model = train_mlp(&split.train, &split.val, &config).map_err(|e| s(&e))?;
            let samples =
                mc_dropout_predict_batch(&model, test, cfg.dropout_passes, derive_seed(seed, &[1])).map_err(|e| s(&e))?;
            samples
                .iter()
                .map(|v| interval_from_samples(v, alpha).map_err(|e| s(&e)))
                .collect()
        }
    }
}

/// Runs every configured method on one split of one dataset.
pub fn run_cell(
    data: &TabularDataset,
    dataset_index: usize,
    split_seed: u64,
    config: &ExperimentConfig,
    config_hash: &str,
) -> Result<CellResult> {
    let cfg = &config.regress;
    let split = prepare_split(data, split_seed, cfg.split_fractions)?;
    let cell_seed = |k: u64| derive_seed(config.seed, &[dataset_index as u64, split_seed, k]);
    let search = cfg.methods.iter().any(|m| m.needs_search()).then(|| {
        random_search(&split.train, &split.val, cfg.search_trials, &cfg.search, cell_seed(0)).map_err(|e| e.to_string())
    });
    let best = search.as_ref().and_then(|s| s.as_ref().ok()).map(|o| &o.best);
    let reports = cfg
        .methods
        .iter()
        .map(|&method| {
            let outcome = method_intervals(method, &split, best, cfg, config.alpha, cell_seed(method_index(method)))
                .and_then(|iv| {
                    let coverage = coverage_intervals(&iv, &split.test.labels).map_err(|e| e.to_string())?;
                    let width = width_regression(&iv, split.s_y).map_err(|e| e.to_string())?;
                    Ok((coverage, width))
                });
            if let Err(e) = &outcome {
                eprintln!("regress: {} split {split_seed} {} failed: {e}", data.name, method.name());
            }
            let (coverage, width, status) = match outcome {
                Ok((c, w)) => (Some(c), Some(w), Status::Ok),
                Err(_) => (None, None, Status::Failed),
            };
            CoverageReport {
                method: method.name().into(),
                dataset: data.name.clone(),
                shift: "clean".into(),
                severity: "0".into(),
                alpha: config.alpha,
                coverage,
                width,
                brier: None,
                ece: None,
                accuracy: None,
                n: split.test.len(),
                seed: split_seed,
                status,
                config_hash: config_hash.into(),
            }
        })
        .collect();
    Ok(CellResult { reports, search })
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    match xs.len() {
        0 => (None, None),
        1 => (Some(xs[0]), Some(0.0)),
        _ => (Some(mean(xs)), Some(std_dev(xs))),
    }
}

/// Per (dataset, method) over split seeds, then per method across datasets.
pub fn summarize(reports: &[CoverageReport], methods: &[RegressMethod], datasets: &[String]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for method in methods {
        let mut per_dataset = (Vec::new(), Vec::new());
        let (mut ok_total, mut failed_total) = (0, 0);
        for dataset in datasets {
            let cell: Vec<&CoverageReport> = reports
                .iter()
                .filter(|r| r.method == method.name() && &r.dataset == dataset)
                .collect();
            let cov: Vec<f64> = cell.iter().filter_map(|r| r.coverage).collect();
            let wid: Vec<f64> = cell.iter().filter_map(|r| r.width).collect();
            let ok = cell.iter().filter(|r| r.is_ok()).count();
            let (coverage_mean, coverage_std) = mean_std(&cov);
            let (width_mean, width_std) = mean_std(&wid);
            per_dataset.0.extend(coverage_mean);
            per_dataset.1.extend(width_mean);
            ok_total += ok;
            failed_total += cell.len() - ok;
            rows.push(SummaryRow {
                method: method.name().into(),
                dataset: dataset.clone(),
                coverage_mean,
                coverage_std,
                width_mean,
                width_std,
                ok,
                failed: cell.len() - ok,
            });
        }
        let (coverage_mean, coverage_std) = mean_std(&per_dataset.0);
        let (width_mean, width_std) = mean_std(&per_dataset.1);
        rows.push(SummaryRow {
            method: method.name().into(),
            dataset: "all".into(),
            coverage_mean,
            coverage_std,
            width_mean,
            width_std,
            ok: ok_total,
            failed: failed_total,
        });
    }
    rows
}

pub fn load_datasets(cfg: &RegressConfig) -> Result<Vec<TabularDataset>> {
    if cfg.datasets.is_empty() {
        return Err(HarnessError::Config("regress.datasets is empty".into()));
    }
    if cfg.methods.is_empty() {
        return Err(HarnessError::Config("regress.methods is empty".into()));
    }
    if cfg.split_seeds.is_empty() {
        return Err(HarnessError::Config("regress.split_seeds is empty".into()));
    }
    cfg.datasets
        .iter()
        .map(|entry| {
            let target: TargetColumn = entry.target.parse().unwrap();
            let mut data = load_tabular(&entry.path, &target)
                .map_err(|e| HarnessError::Input(format!("dataset {}: {e}", entry.name)))?;
            data.name = entry.name.clone();
            Ok(data)
        })
        .collect()
}

pub fn cmd_regress(config: &ExperimentConfig) -> Result<Outcome> {
    let cfg = &config.regress;
    let datasets = load_datasets(cfg)?;
    let hash = config.hash();
    let cells: Vec<(usize, u64)> = (0..datasets.len())
        .flat_map(|d| cfg.split_seeds.iter().map(move |&s| (d, s)))
        .collect();
    // Cells run in parallel; results are collected in cell order.
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|&(d, s)| {
            let r = run_cell(&datasets[d], d, s, config, &hash);
            eprintln!("regress: {} split {s} done", datasets[d].name);
            r
        })
        .collect::<Result<_>>()?;

    let dir = config.out.join("regress");
    create_dir(&dir)?;
    let mut outcome = Outcome::default();
    let mut reports = Vec::new();
    for (&(d, s), cell) in cells.iter().zip(results) {
        if let Some(search) = cell.search {
            let log = match search {
                Ok(o) => serde_json::to_value(o).expect("search outcome serializes"),
                Err(e) => serde_json::json!({ "error": e }),
            };
            let path = dir.join("trials").join(format!("{}_split{s}.json", datasets[d].name));
            outcome.files.push(write_json(&path, &log)?);
        }
        reports.extend(cell.reports);
    }
    outcome.failed_cells = reports.iter().filter(|r| !r.is_ok()).count();
    let names: Vec<String> = datasets.iter().map(|d| d.name.clone()).collect();
    let summary = summarize(&reports, &cfg.methods, &names);
    outcome.files.push(write_reports(&dir.join("reports.csv"), &reports)?);
    outcome.files.push(write_csv(&dir.join("summary.csv"), &summary)?);
    let mut by_method: BTreeMap<&str, &SummaryRow> = BTreeMap::new();
    for row in summary.iter().filter(|r| r.dataset == "all") {
        by_method.insert(&row.method, row);
    }
    for (method, row) in by_method {
        eprintln!(
            "regress: {method:>18} coverage {:.3} width {:.3}",
            row.coverage_mean.unwrap_or(f64::NAN),
            row.width_mean.unwrap_or(f64::NAN)
        );
    }
    Ok(outcome)
}
