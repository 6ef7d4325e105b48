//! Cross-method analysis of report CSVs: share of each method's points above
//! the pooled width→coverage regression line, and per-condition rank tables.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use uqcov::metrics::{fraction_above_line, method_ranks, read_reports_csv, CoverageReport, Direction, WidthCoveragePoint};

use crate::config::{ExperimentConfig, GroupBy};
use crate::{write_csv, write_json, HarnessError, Outcome, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAnalysis {
    pub level: String,
    pub intercept: f64,
    pub slope: f64,
    pub fractions: BTreeMap<String, f64>,
    pub points: Vec<WidthCoveragePoint>,
}

/// Ranks of one method under one (dataset, shift, severity) condition; 1 is best.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub level: String,
    pub dataset: String,
    pub shift: String,
    pub severity: String,
    pub method: String,
    pub coverage_rank: Option<f64>,
    pub brier_rank: Option<f64>,
    pub ece_rank: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRankRow {
    pub level: String,
    pub method: String,
    pub coverage_rank: Option<f64>,
    pub brier_rank: Option<f64>,
    pub ece_rank: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub level: f64,
    pub coverage: f64,
    pub width: f64,
}

/// Mean coverage and width of one method along one shift type; the clean
/// rows supply level 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSeries {
    pub shift: String,
    pub method: String,
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub group_by: GroupBy,
    pub sources: Vec<PathBuf>,
    pub levels: Vec<LevelAnalysis>,
    pub ranks: Vec<RankRow>,
    pub mean_ranks: Vec<MeanRankRow>,
    pub series: Vec<ShiftSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct AboveLineRow {
    level: String,
    method: String,
    fraction: f64,
    intercept: f64,
    slope: f64,
    points: usize,
}

/// Numeric levels sort numerically, before any non-numeric ones.
pub fn level_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

#[derive(Default)]
struct Acc {
    coverage: Vec<f64>,
    width: Vec<f64>,
    brier: Vec<f64>,
    ece: Vec<f64>,
}

fn avg(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Condition-level means: one value per (method, dataset, shift, severity),
/// averaging repeated rows such as split seeds.
struct Cell {
    method: String,
    dataset: String,
    shift: String,
    severity: String,
    coverage: Option<f64>,
    width: Option<f64>,
    brier: Option<f64>,
    ece: Option<f64>,
}

fn cells(reports: &[CoverageReport]) -> Vec<Cell> {
    let mut acc: BTreeMap<(String, String, String, String), Acc> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.is_ok()) {
        let a = acc
            .entry((r.method.clone(), r.dataset.clone(), r.shift.clone(), r.severity.clone()))
            .or_default();
        a.coverage.extend(r.coverage);
        a.width.extend(r.width);
        a.brier.extend(r.brier);
        a.ece.extend(r.ece);
    }
    acc.into_iter()
        .map(|((method, dataset, shift, severity), a)| Cell {
            method,
            dataset,
            shift,
            severity,
            coverage: avg(&a.coverage),
            width: avg(&a.width),
            brier: avg(&a.brier),
            ece: avg(&a.ece),
        })
        .collect()
}

fn level_of(cell: &Cell, group_by: GroupBy) -> String {
    match group_by {
        GroupBy::Severity => cell.severity.clone(),
        GroupBy::ShiftSeverity => format!("{}:{}", cell.shift, cell.severity),
    }
}

fn rank_metric(
    group: &[&Cell],
    value: impl Fn(&Cell) -> Option<f64>,
    direction: Direction,
) -> Result<BTreeMap<String, f64>> {
    let scores: Vec<(String, f64)> = group
        .iter()
        .filter_map(|c| value(c).map(|v| (c.method.clone(), v)))
        .collect();
    if scores.len() < 2 {
        return Ok(BTreeMap::new());
    }
    Ok(method_ranks(&scores, direction)
        .map_err(|e| HarnessError::Input(e.to_string()))?
        .into_iter()
        .collect())
}

pub fn analyze(reports: &[CoverageReport], group_by: GroupBy, sources: Vec<PathBuf>) -> Result<Analysis> {
    let cells = cells(reports);
    let methods: BTreeSet<&str> = cells.iter().map(|c| c.method.as_str()).collect();
    if methods.len() < 2 {
        return Err(HarnessError::Input(format!(
            "analysis compares methods and needs at least two, found {}",
            methods.len()
        )));
    }

    let mut by_level: BTreeMap<String, Vec<&Cell>> = BTreeMap::new();
    for c in &cells {
        by_level.entry(level_of(c, group_by)).or_default().push(c);
    }
    let mut level_names: Vec<String> = by_level.keys().cloned().collect();
    level_names.sort_by(|a, b| level_order(a, b));

    let mut levels = Vec::new();
    let mut ranks = Vec::new();
    let mut mean_ranks = Vec::new();
    for level in &level_names {
        let group = &by_level[level];
        let points: Vec<WidthCoveragePoint> = group
            .iter()
            .filter_map(|c| {
                Some(WidthCoveragePoint {
                    method: c.method.clone(),
                    width: c.width?,
                    coverage: c.coverage?,
                })
            })
            .collect();
        let line = fraction_above_line(&points).map_err(|e| HarnessError::Input(format!("level {level}: {e}")))?;
        levels.push(LevelAnalysis {
            level: level.clone(),
            intercept: line.intercept,
            slope: line.slope,
            fractions: line.fractions,
            points,
        });

        let mut conditions: BTreeMap<(&str, &str, &str), Vec<&Cell>> = BTreeMap::new();
        for c in group {
            conditions
                .entry((&c.dataset, &c.shift, &c.severity))
                .or_default()
                .push(c);
        }
        let mut sums: BTreeMap<String, [(f64, usize); 3]> = BTreeMap::new();
        for ((dataset, shift, severity), cond) in conditions {
            let cov = rank_metric(&cond, |c| c.coverage, Direction::HigherIsBetter)?;
            let bri = rank_metric(&cond, |c| c.brier, Direction::LowerIsBetter)?;
            let ec = rank_metric(&cond, |c| c.ece, Direction::LowerIsBetter)?;
            for c in &cond {
                let row = RankRow {
                    level: level.clone(),
                    dataset: dataset.into(),
                    shift: shift.into(),
                    severity: severity.into(),
                    method: c.method.clone(),
                    coverage_rank: cov.get(&c.method).copied(),
                    brier_rank: bri.get(&c.method).copied(),
                    ece_rank: ec.get(&c.method).copied(),
                };
                let s = sums.entry(c.method.clone()).or_default();
                for (slot, r) in s.iter_mut().zip([row.coverage_rank, row.brier_rank, row.ece_rank]) {
                    if let Some(r) = r {
                        slot.0 += r;
                        slot.1 += 1;
                    }
                }
                ranks.push(row);
            }
        }
        for (method, s) in sums {
            let m = |(total, n): (f64, usize)| (n > 0).then(|| total / n as f64);
            mean_ranks.push(MeanRankRow {
                level: level.clone(),
                method,
                coverage_rank: m(s[0]),
                brier_rank: m(s[1]),
                ece_rank: m(s[2]),
            });
        }
    }

    Ok(Analysis {
        group_by,
        sources,
        levels,
        ranks,
        mean_ranks,
        series: shift_series(&cells),
    })
}

fn shift_series(cells: &[Cell]) -> Vec<ShiftSeries> {
    // (shift, method) -> level -> (coverages, widths)
    let mut acc: BTreeMap<(&str, &str), BTreeMap<String, (Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    let mut clean: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for c in cells {
        let (Some(cov), Some(wid)) = (c.coverage, c.width) else {
            continue;
        };
        if c.shift == "clean" {
            let e = clean.entry(&c.method).or_default();
            e.0.push(cov);
            e.1.push(wid);
        } else if c.severity.parse::<f64>().is_ok() {
            let e = acc
                .entry((&c.shift, &c.method))
                .or_default()
                .entry(c.severity.clone())
                .or_default();
            e.0.push(cov);
            e.1.push(wid);
        }
    }
    acc.into_iter()
        .map(|((shift, method), levels)| {
            let mut points: Vec<SeriesPoint> = clean
                .get(method)
                .map(|(c, w)| SeriesPoint {
                    level: 0.0,
                    coverage: avg(c).unwrap(),
                    width: avg(w).unwrap(),
                })
                .into_iter()
                .collect();
            points.extend(levels.into_iter().map(|(severity, (c, w))| SeriesPoint {
                level: severity.parse().unwrap(),
                coverage: avg(&c).unwrap(),
                width: avg(&w).unwrap(),
            }));
            points.sort_by(|a, b| a.level.total_cmp(&b.level));
            ShiftSeries {
                shift: shift.into(),
                method: method.into(),
                points,
            }
        })
        .collect()
}

pub fn read_reports(paths: &[PathBuf]) -> Result<Vec<CoverageReport>> {
    let mut all = Vec::new();
    for path in paths {
        let file = File::open(path).map_err(|e| HarnessError::Input(format!("{}: {e}", path.display())))?;
        all.extend(read_reports_csv(file).map_err(|e| HarnessError::Input(format!("{}: {e}", path.display())))?);
    }
    Ok(all)
}

pub fn cmd_analyze(config: &ExperimentConfig) -> Result<Outcome> {
    let paths = &config.analyze.reports;
    if paths.is_empty() {
        return Err(HarnessError::Config("no report files given".into()));
    }
    let reports = read_reports(paths)?;
    let analysis = analyze(&reports, config.analyze.group_by, paths.clone())?;
    let dir = config.out.join("analysis");
    let above: Vec<AboveLineRow> = analysis
        .levels
        .iter()
        .flat_map(|l| {
            l.fractions.iter().map(|(method, &fraction)| AboveLineRow {
                level: l.level.clone(),
                method: method.clone(),
                fraction,
                intercept: l.intercept,
                slope: l.slope,
                points: l.points.iter().filter(|p| &p.method == method).count(),
            })
        })
        .collect();
    Ok(Outcome {
        files: vec![
            write_csv(&dir.join("above_line.csv"), &above)?,
            write_csv(&dir.join("ranks.csv"), &analysis.ranks)?,
            write_csv(&dir.join("mean_ranks.csv"), &analysis.mean_ranks)?,
            write_json(&dir.join("analysis.json"), &analysis)?,
        ],
        failed_cells: 0,
    })
}
