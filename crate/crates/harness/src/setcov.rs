//! Prediction-set metrics over externally supplied probability files.

use std::collections::BTreeMap;

use uqcov::metrics::{CoverageReport, Status};
use uqcov::numerics::Matrix;
use uqcov::probfile::{read_probfile_with, ProbabilityTable, Values};

use crate::config::ExperimentConfig;
use crate::mnist::set_metrics;
use crate::{write_reports, HarnessError, Outcome, Result};

type Key = (String, String, String, String);

/// Files sharing (method, dataset, shift, severity) are pooled row-wise,
/// in the order given.
pub fn pool(tables: Vec<ProbabilityTable>) -> Result<BTreeMap<Key, ProbabilityTable>> {
    let mut groups: BTreeMap<Key, ProbabilityTable> = BTreeMap::new();
    for t in tables {
        let key = (t.method.clone(), t.dataset.clone(), t.shift.clone(), t.severity.clone());
        match groups.get_mut(&key) {
            None => {
                groups.insert(key, t);
            }
            Some(acc) => {
                if acc.classes() != t.classes() {
                    return Err(HarnessError::Input(format!(
                        "{key:?}: files disagree on the number of classes ({} vs {})",
                        acc.classes(),
                        t.classes()
                    )));
                }
                let k = acc.classes();
                let mut data = std::mem::replace(&mut acc.probabilities, Matrix::zeros(0, 0)).into_vec();
                data.extend_from_slice(t.probabilities.as_slice());
                acc.probabilities = Matrix::new(data.len() / k, k, data).expect("consistent shape");
                acc.labels.extend(t.labels);
            }
        }
    }
    Ok(groups)
}

pub fn setcov_reports(config: &ExperimentConfig) -> Result<Vec<CoverageReport>> {
    let cfg = &config.setcov;
    if cfg.files.is_empty() {
        return Err(HarnessError::Config("no probability files given".into()));
    }
    let values = if cfg.logits { Values::Logits } else { Values::Probabilities };
    let tables = cfg
        .files
        .iter()
        .map(|p| read_probfile_with(p, values).map_err(|e| HarnessError::Input(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    let hash = config.hash();
    Ok(pool(tables)?
        .into_values()
        .map(|t| {
            let base = CoverageReport {
                method: t.method.clone(),
                dataset: t.dataset.clone(),
                shift: t.shift.clone(),
                severity: t.severity.clone(),
                alpha: config.alpha,
                coverage: None,
                width: None,
                brier: None,
                ece: None,
                accuracy: None,
                n: t.len(),
                seed: config.seed,
                status: Status::Failed,
                config_hash: hash.clone(),
            };
            match set_metrics(&t.probabilities, &t.labels, config.alpha, cfg.ece_bins) {
                Ok(m) => CoverageReport {
                    coverage: Some(m.coverage),
                    width: Some(m.width),
                    brier: Some(m.brier),
                    ece: Some(m.ece),
                    accuracy: Some(m.accuracy),
                    status: Status::Ok,
                    ..base
                },
                Err(e) => {
                    eprintln!("setcov: {} {} {} {}: {e}", t.method, t.dataset, t.shift, t.severity);
                    base
                }
            }
        })
        .collect())
}

pub fn cmd_setcov(config: &ExperimentConfig) -> Result<Outcome> {
    let reports = setcov_reports(config)?;
    let path = config.out.join("setcov").join("reports.csv");
    Ok(Outcome {
        failed_cells: reports.iter().filter(|r| !r.is_ok()).count(),
        files: vec![write_reports(&path, &reports)?],
    })
}
